"""Training loops: contrastive pre-training over an unlabelled pool and
supervised training with stratified T x K batches, plus validation-based
model selection.
"""

import numpy as np

from . import model as model_mod
from .augment import AugmentSpec, expand_rare, make_views
from .data import (generate_synthetic, load_dataset, preset_paper_shaped,
                   rare_classes, stratified_batches)
from .evaluation import ReferenceSet, embed_samples, knn_predict, compute_metrics
from .losses import (ContrastivePairBatch, LabeledBatch, batch_all_triplet,
                     batch_hard_triplet, cross_entropy, nt_xent)
from .model import EncoderConfig, backward, forward, init_params, sgd_step
from .numcore import RngStream


def acquire_dataset(cfg):
    """Load or synthesize the labelled dataset described by the config."""
    ds_cfg = cfg.dataset
    if "path" in ds_cfg:
        return load_dataset(ds_cfg["path"])
    if ds_cfg.get("preset") == "paper-shaped":
        sizes = preset_paper_shaped(ds_cfg["scale"])
    elif ds_cfg.get("preset") is not None:
        raise ValueError(f"unknown dataset preset {ds_cfg['preset']!r}")
    else:
        sizes = ds_cfg["class_sizes"]
    return generate_synthetic(sizes, shape=tuple(ds_cfg["shape"]),
                              seed=cfg.seed, separation=ds_cfg["separation"],
                              rare_threshold=ds_cfg["rare_threshold"])


def encoder_config(cfg, dataset):
    embed_dim = cfg.train["embed_dim"]
    if embed_dim is None:
        embed_dim = dataset.class_count
    shape = dataset.samples[0].volume.shape
    return EncoderConfig(input_shape=shape,
                         conv_blocks=tuple(tuple(b) for b in cfg.encoder["conv_blocks"]),
                         hidden_dim=cfg.encoder["hidden_dim"],
                         embed_dim=embed_dim,
                         head_mode=cfg.head_mode)


def unlabelled_pool(cfg, dataset):
    """Samples used for contrastive pre-training, labels ignored.

    By default a separate synthetic pool with the dataset's volume shape;
    optionally the training split itself (labels stripped conceptually).
    """
    if cfg.pretrain["include_train_unlabelled"]:
        return dataset.split_samples("train")
    size = int(cfg.pretrain["unlabelled_size"])
    n_groups = min(8, max(2, dataset.class_count))
    per = max(5, size // n_groups)
    shape = dataset.samples[0].volume.shape
    pool = generate_synthetic([per] * n_groups, shape=shape,
                              seed=RngStream(cfg.seed).child("unlabelled-pool").stream_id,
                              separation=cfg.dataset.get("separation", "easy"))
    return pool.samples


def _triplet_loss_fn(name):
    return batch_hard_triplet if name == "batch_hard" else batch_all_triplet


def run_pretrain(cfg, dataset, checkpoint_every=None, checkpoint_fn=None):
    """SimCLR-style loop over the unlabelled pool with the configured
    contrastive loss.

    NT-Xent sees the two views of each image as a positive pair; the
    triplet variants treat each source image as a pseudo-class of its
    two views (T = batch size, K = 2). Returns (params, per-epoch mean
    losses).
    """
    pcfg = cfg.pretrain
    if pcfg["loss"] == "none":
        raise ValueError("pretrain loss is 'none'; nothing to pre-train")
    pool = unlabelled_pool(cfg, dataset)
    enc_cfg = encoder_config(cfg, dataset)
    params = init_params(enc_cfg, RngStream(cfg.seed).child("init"))
    spec = AugmentSpec.from_dict(cfg.augment["spec"])
    gamma = pcfg["localization_gamma"]
    epoch_losses = []
    velocity = None
    order_rng = RngStream(cfg.seed).child("pretrain-order")
    for epoch in range(pcfg["epochs"]):
        order = order_rng.permutation(len(pool))
        losses = []
        for start in range(0, len(order), pcfg["batch_size"]):
            chunk = order[start:start + pcfg["batch_size"]]
            if len(chunk) < 2:
                continue
            views = []
            for i in chunk:
                s = pool[i]
                vrng = RngStream(cfg.seed).child(f"views-e{epoch}-{s.id}")
                pair = make_views(s.volume, s.mask, spec, vrng, gamma,
                                  source_id=s.id)
                views.extend([pair.view_a, pair.view_b])
            batch = np.stack(views)
            out, cache = forward(params, batch)
            if pcfg["loss"] == "ntxent":
                pair_of = np.arange(len(views)).reshape(-1, 2)[:, ::-1].ravel()
                res = nt_xent(ContrastivePairBatch(out, pair_of,
                                                   pcfg["temperature"]))
            else:
                pseudo = np.repeat(np.arange(len(chunk)), 2)
                res = _triplet_loss_fn(pcfg["loss"])(
                    LabeledBatch(out, pseudo), margin=pcfg["margin"])
            grads = backward(params, cache, res.grad)
            velocity = sgd_step(params, grads, pcfg["lr"], pcfg["momentum"],
                                velocity)
            losses.append(res.value)
        epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
        if checkpoint_fn and checkpoint_every and \
                (epoch + 1) % checkpoint_every == 0:
            checkpoint_fn(epoch + 1, params)
    return params, epoch_losses


def transfer_params(pre_params, target_cfg, seed=0):
    """Carry pre-trained weights into a (possibly different-headed) config.

    Layers whose shapes match transfer verbatim; any layer that differs
    (the embedding head when embed_dim changed) is freshly initialized.
    """
    target = model_mod.init_zero(target_cfg)
    fresh = init_params(target_cfg, RngStream(seed).child("head-reinit"))
    for k, a in target.arrays.items():
        src = pre_params.arrays.get(k)
        if src is not None and src.shape == a.shape:
            a[...] = src
        else:
            a[...] = fresh.arrays[k]
    return target


def validation_recall_macro(params, dataset, k):
    """Recall_M of val queries against a train-embedding reference."""
    train = dataset.split_samples("train")
    val = dataset.split_samples("val")
    ref = ReferenceSet(embed_samples(params, train),
                       [s.label for s in train], provenance=("train",))
    emb = embed_samples(params, val)
    truths = np.array([s.label for s in val])
    preds = np.zeros(truths.size, dtype=np.int64)
    nbrs = []
    kk = min(k, len(train))
    for i in range(truths.size):
        preds[i], nbr = knn_predict(emb[i], ref, kk)
        nbrs.append(ref.labels[nbr])
    rep = compute_metrics(preds, truths, nbrs, set(),
                          class_count=dataset.class_count, rank_ks=(1,))
    return rep.recall_macro


def apply_augmentation(cfg, dataset):
    """Rare-case expansion of the training split when enabled.

    The expanded dataset is also what evaluation embeds as its reference
    set: the combined train+val pool is the one the model trained on.
    """
    if not cfg.augment["enabled"]:
        return dataset
    rare = rare_classes(dataset)
    if not rare:
        return dataset
    return expand_rare(dataset, rare, cfg.augment["n_copies"],
                       AugmentSpec.from_dict(cfg.augment["spec"]),
                       seed=RngStream(cfg.seed).child("expand").stream_id)


def run_train(cfg, dataset, init_from=None):
    """Supervised training with stratified batches and the configured loss.

    Rare-case expansion is applied first when enabled. Validation
    Recall_M is measured every `val_every` epochs (and at the end); the
    returned params are the best-validation snapshot (ties to the
    earliest epoch). Returns (best_params, curve) where curve rows are
    (epoch, mean train loss, val recall or None).
    """
    tcfg = cfg.train
    train_ds = apply_augmentation(cfg, dataset)
    enc_cfg = encoder_config(cfg, dataset)
    if init_from is not None:
        params = transfer_params(init_from, enc_cfg, seed=cfg.seed)
    else:
        params = init_params(enc_cfg, RngStream(cfg.seed).child("init"))

    train_samples = train_ds.split_samples("train")
    labels = np.array([s.label for s in train_samples])
    classes_avail = np.unique(labels).size
    t_b = min(tcfg["classes_per_batch"], classes_avail)
    loss_name = tcfg["loss"]
    batch_rng = RngStream(cfg.seed).child("batches")
    velocity = None
    curve = []
    best = None  # (recall, epoch, params copy)
    for epoch in range(1, tcfg["epochs"] + 1):
        batches = stratified_batches(labels, t_b, tcfg["samples_per_class"],
                                     batch_rng)
        losses = []
        for idx in batches:
            batch = np.stack([train_samples[i].volume for i in idx])
            y = labels[idx]
            out, cache = forward(params, batch)
            if loss_name == "cross_entropy":
                res = cross_entropy(out, y)
            else:
                res = _triplet_loss_fn(loss_name)(
                    LabeledBatch(out, y), margin=tcfg["margin"])
            grads = backward(params, cache, res.grad)
            velocity = sgd_step(params, grads, tcfg["lr"], tcfg["momentum"],
                                velocity)
            losses.append(res.value)
        val_recall = None
        if epoch % tcfg["val_every"] == 0 or epoch == tcfg["epochs"]:
            val_recall = validation_recall_macro(params, train_ds,
                                                 cfg.eval["k"])
            if best is None or val_recall > best[0]:
                best = (val_recall, epoch, params.copy())
        curve.append((epoch, float(np.mean(losses)) if losses else 0.0,
                      val_recall))
    best_params = best[2] if best is not None else params
    return best_params, curve
