"""Experiment configuration: strict JSON schema, defaults, and stable
digests for idempotent stage resume.

Unknown fields anywhere in the config are rejected so typos fail loudly
instead of silently falling back to defaults.
"""

import hashlib
import json
from dataclasses import dataclass, field

from .augment import AugmentSpec

PRETRAIN_LOSSES = ("none", "ntxent", "batch_all", "batch_hard")
TRAIN_LOSSES = ("cross_entropy", "batch_all", "batch_hard")

# experiment naming scheme: ContrastivePretrain-Augment-Loss
_LOSS_LABEL = {"none": "None", "ntxent": "NTXent", "batch_all": "BATriplet",
               "batch_hard": "BHTriplet", "cross_entropy": "CrossEntropy"}


def _take(d, key, default, where):
    if not isinstance(d, dict):
        raise ValueError(f"config section {where!r} must be an object")
    return d.get(key, default)


def _reject_unknown(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValueError(f"unknown config field(s) {sorted(unknown)} in {where!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw):
        _reject_unknown(raw, ("seed", "dataset", "encoder", "pretrain",
                              "augment", "train", "eval"), "<root>")
        seed = int(raw.get("seed", 0))

        ds = dict(raw.get("dataset", {}))
        _reject_unknown(ds, ("path", "preset", "scale", "class_sizes", "shape",
                             "separation", "rare_threshold"), "dataset")
        if "path" not in ds:
            ds.setdefault("preset", None)
            ds.setdefault("scale", 0.25)
            ds.setdefault("class_sizes", None)
            ds.setdefault("shape", [32, 32, 8])
            ds.setdefault("separation", "easy")
            ds.setdefault("rare_threshold", 0.01)
            if ds["preset"] is None and ds["class_sizes"] is None:
                raise ValueError("dataset needs a path, a preset, or class_sizes")

        enc = dict(raw.get("encoder", {}))
        _reject_unknown(enc, ("conv_blocks", "hidden_dim"), "encoder")
        enc.setdefault("conv_blocks", [[4, 3, 2], [8, 3, 2]])
        enc.setdefault("hidden_dim", 32)

        pre = dict(raw.get("pretrain", {}))
        _reject_unknown(pre, ("loss", "epochs", "batch_size", "temperature",
                              "localization_gamma", "margin", "lr", "momentum",
                              "unlabelled_size", "include_train_unlabelled"),
                        "pretrain")
        pre.setdefault("loss", "none")
        if pre["loss"] not in PRETRAIN_LOSSES:
            raise ValueError(f"unknown pretrain loss {pre['loss']!r}")
        pre.setdefault("epochs", 10)
        if pre["epochs"] > 20:
            raise ValueError("pretraining is capped at 20 epochs")
        pre.setdefault("batch_size", 15)
        pre.setdefault("temperature", 0.5)
        pre.setdefault("localization_gamma", 0.1)
        pre.setdefault("margin", 1.0)
        pre.setdefault("lr", 0.01)
        pre.setdefault("momentum", 0.9)
        pre.setdefault("unlabelled_size", 120)
        pre.setdefault("include_train_unlabelled", False)

        aug = dict(raw.get("augment", {}))
        _reject_unknown(aug, ("enabled", "n_copies", "spec"), "augment")
        aug.setdefault("enabled", False)
        aug.setdefault("n_copies", 5)
        aug["spec"] = AugmentSpec.from_dict(aug.get("spec", {})).to_dict()

        tr = dict(raw.get("train", {}))
        _reject_unknown(tr, ("loss", "epochs", "classes_per_batch",
                             "samples_per_class", "margin", "embed_dim",
                             "lr", "momentum", "val_every"), "train")
        tr.setdefault("loss", "batch_hard")
        if tr["loss"] not in TRAIN_LOSSES:
            raise ValueError(f"unknown training loss {tr['loss']!r}")
        tr.setdefault("epochs", 50)
        tr.setdefault("classes_per_batch", 10)
        tr.setdefault("samples_per_class", 3)
        tr.setdefault("margin", 1.0)
        # cross-entropy heads get embed_dim = class count at runtime
        tr.setdefault("embed_dim", 6 if tr["loss"] != "cross_entropy" else None)
        tr.setdefault("lr", 0.01)
        tr.setdefault("momentum", 0.9)
        tr.setdefault("val_every", 5)

        ev = dict(raw.get("eval", {}))
        _reject_unknown(ev, ("k", "rank_ks"), "eval")
        ev.setdefault("k", 7)
        ev.setdefault("rank_ks", [1, 5])

        return cls(seed=seed, dataset=ds, encoder=enc, pretrain=pre,
                   augment=aug, train=tr, eval=ev)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return {"seed": self.seed, "dataset": self.dataset,
                "encoder": self.encoder, "pretrain": self.pretrain,
                "augment": self.augment, "train": self.train,
                "eval": self.eval}

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def stage_digest(self, stage):
        """Digest over only the sections that influence a stage's output."""
        sections = {"dataset": ("seed", "dataset"),
                    "pretrain": ("seed", "dataset", "encoder", "pretrain", "train"),
                    "train": ("seed", "dataset", "encoder", "pretrain",
                              "augment", "train"),
                    "eval": ("seed", "dataset", "encoder", "pretrain",
                             "augment", "train", "eval")}[stage]
        payload = json.dumps({k: getattr(self, k) for k in sections},
                             sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    @property
    def head_mode(self):
        return "logits" if self.train["loss"] == "cross_entropy" \
            else "l2_normalized"

    def experiment_name(self):
        pre = _LOSS_LABEL[self.pretrain["loss"]]
        aug = "Aug" if self.augment["enabled"] else "None"
        return f"{pre}-{aug}-{_LOSS_LABEL[self.train['loss']]}"
