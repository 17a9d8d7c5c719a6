"""Config-driven artifact construction with fingerprint-keyed caching.

Everything the workbench commands need (datasets, derivative datasets, the
fourteen-entry zoo, the extractor) is built here, cached under the cache
root, and reused on fingerprint hits, so reruns with an unchanged config do
no recomputation.
"""

import os
from pathlib import Path

from . import datasets as D
from . import zoo as Z
from .extractor import StyleExtractor
from .utils import derive_seed, fingerprint_json

CACHE_ENV = "STYLESWAP_CACHE"

# the fourteen zoo entries: table grid (4 archs x 3 train sets) + 2 defenses
ENTRY_SPECS = {
    "RNB": ("ResNet18", "standard", "base"),
    "VGGB": ("VGG19", "standard", "base"),
    "D121B": ("DenseNet121", "standard", "base"),
    "GNB": ("GoogLeNet", "standard", "base"),
    "RB": ("ResNet18", "standard", "robust"),
    "VGGR": ("VGG19", "standard", "robust"),
    "D121R": ("DenseNet121", "standard", "robust"),
    "GNR": ("GoogLeNet", "standard", "robust"),
    "NRB": ("ResNet18", "standard", "nonrobust"),
    "VGGNR": ("VGG19", "standard", "nonrobust"),
    "D121NR": ("DenseNet121", "standard", "nonrobust"),
    "GNNR": ("GoogLeNet", "standard", "nonrobust"),
    "PGDAT": ("ResNet18", "pgd_at", "base"),
    "IAT": ("ResNet18", "iat", "base"),
}
DESK_DEFAULT_MODELS = ("RNB", "VGGB", "PGDAT", "IAT")
DESK_DERIVED_MODELS = ("RB", "NRB")


class MissingPrerequisite(RuntimeError):
    """An artifact this step depends on has not been built yet; the message
    names the command to run first."""


def cache_root(config=None) -> Path:
    return Path(os.environ.get(CACHE_ENV, "styleswap_cache"))


def _dataset_dir(config, name, key_fields):
    fp = fingerprint_json(key_fields)
    return cache_root(config) / "datasets" / f"{name}-{fp}"


def base_dataset(config, split) -> D.DatasetHandle:
    data = config["data"]
    size = data["train_size"] if split == "train" else data["test_size"]
    key = {"source": data["source"], "split": split, "size": size,
           "seed": config["run"]["seed"]}
    path = _dataset_dir(config, f"base-{split}", key)
    if path.exists():
        return D.load_dataset(path)
    ds = D.load_base_dataset(data["source"], split, size=size,
                             seed=config["run"]["seed"], root=data["data_root"])
    D.save_dataset(ds, path)
    return ds


def _zoo_dir(config) -> Path:
    return cache_root(config) / "zoo"


def _entry_train_config(config, name):
    zoo = config["zoo"]
    arch, regime, _ = ENTRY_SPECS[name]
    epochs = {"standard": zoo["epochs_standard"], "pgd_at": zoo["epochs_at"],
              "iat": zoo["epochs_at"]}[regime]
    return Z.TrainConfig(epochs=epochs, batch_size=zoo["batch_size"], lr=zoo["lr"],
                         seed=derive_seed(zoo["seed"], name))


def model_cache_key(config, name):
    arch, regime, train_set = ENTRY_SPECS[name]
    zoo = config["zoo"]
    key = {"name": name, "arch": arch, "regime": regime, "train_set": train_set,
           "zoo": zoo, "data": config["data"], "seed": config["run"]["seed"]}
    return fingerprint_json(key)


def model_dir(config, name) -> Path:
    return _zoo_dir(config) / f"{name}-{model_cache_key(config, name)}"


def has_model(config, name) -> bool:
    return model_dir(config, name).exists()


def get_model(config, name) -> Z.ClassifierHandle:
    path = model_dir(config, name)
    if not path.exists():
        raise MissingPrerequisite(
            f"model {name} not trained yet; run: styleswap train --models {name}")
    return Z.load_model(path)


def nonrobust_dataset(config) -> D.DatasetHandle:
    data = config["data"]
    nr = data["nonrobust"]
    key = {"kind": "nonrobust", "nr": nr, "seed": config["run"]["seed"],
           "base": {"source": data["source"], "size": data["train_size"]},
           "model": model_cache_key(config, "RNB")}
    path = _dataset_dir(config, "nonrobust-train", key)
    if path.exists():
        return D.load_dataset(path)
    if not has_model(config, "RNB"):
        raise MissingPrerequisite(
            "the non-robust construction needs the standard model; run: "
            "styleswap train --models RNB")
    base = base_dataset(config, "train")
    if nr["base_subset"]:
        base = base.subset(range(min(nr["base_subset"], len(base))), note="nr-base")
    ds = D.construct_nonrobust_dataset(base, get_model(config, "RNB"),
                                       epsilon=nr["epsilon"], steps=nr["steps"],
                                       seed=config["run"]["seed"],
                                       step_size=nr["step_size"],
                                       target_rule=nr["target_rule"],
                                       norm=nr["norm"])
    D.save_dataset(ds, path)
    return ds


def robust_dataset(config) -> D.DatasetHandle:
    data = config["data"]
    rb = data["robust"]
    key = {"kind": "robust", "rb": rb, "seed": config["run"]["seed"],
           "base": {"source": data["source"], "size": data["train_size"]},
           "model": model_cache_key(config, "PGDAT")}
    path = _dataset_dir(config, "robust-train", key)
    if path.exists():
        return D.load_dataset(path)
    if not has_model(config, "PGDAT"):
        raise MissingPrerequisite(
            "the robust construction needs the adversarially trained model; "
            "run: styleswap train --models PGDAT")
    base = base_dataset(config, "train")
    if rb["base_subset"]:
        base = base.subset(range(min(rb["base_subset"], len(base))), note="r-base")
    ds = D.construct_robust_dataset(base, get_model(config, "PGDAT"),
                                    steps=rb["steps"], step_size=rb["step_size"],
                                    seed=config["run"]["seed"], init=rb["init"])
    D.save_dataset(ds, path)
    return ds


def train_set_for(config, name) -> D.DatasetHandle:
    _, _, train_set = ENTRY_SPECS[name]
    if train_set == "base":
        return base_dataset(config, "train")
    if train_set == "robust":
        return robust_dataset(config)
    return nonrobust_dataset(config)


def train_entry(config, name) -> Z.ClassifierHandle:
    """Train (or load) one zoo entry; dependencies must already exist."""
    if name not in ENTRY_SPECS:
        raise ValueError(f"unknown zoo entry {name!r}; known: {sorted(ENTRY_SPECS)}")
    path = model_dir(config, name)
    if path.exists():
        return Z.load_model(path)
    arch, regime, _ = ENTRY_SPECS[name]
    train_ds = train_set_for(config, name)
    test_ds = base_dataset(config, "test")
    norm = D.channel_stats(base_dataset(config, "train"))
    hparams = _entry_train_config(config, name)
    handle = Z.build_model(arch, seed=derive_seed(config["zoo"]["seed"], name, "init"),
                           normalization=norm)
    zoo = config["zoo"]
    if regime == "standard":
        trained = Z.train_standard(handle, train_ds, hparams, eval_ds=test_ds)
    elif regime == "pgd_at":
        trained = Z.train_pgd_adversarial(handle, train_ds, zoo["at_epsilon"],
                                          zoo["at_steps"], hparams, eval_ds=test_ds)
    else:
        trained = Z.train_interpolated_adversarial(
            handle, train_ds, zoo["at_epsilon"], zoo["at_steps"],
            {"alpha": zoo["iat_alpha"]}, hparams, eval_ds=test_ds)
    Z.save_model(trained, path)
    Z.write_zoo_manifest(_zoo_dir(config))
    return trained


def available_models(config) -> dict:
    """name -> handle for every cached zoo entry under this config."""
    out = {}
    for name in ENTRY_SPECS:
        if has_model(config, name):
            out[name] = get_model(config, name)
    return out


def build_extractor(config) -> StyleExtractor:
    ex = config["extractor"]
    return StyleExtractor(backend=ex["backend"], weights_path=ex["weights_path"],
                          seed=ex["seed"], upsample_to=ex["upsample_to"])
