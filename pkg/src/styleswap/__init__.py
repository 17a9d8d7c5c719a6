"""Style-substitution adversarial example workbench."""

__version__ = "0.1.0"

from .datasets import (  # noqa: F401
    DatasetHandle, LabeledExample, construct_nonrobust_dataset,
    construct_robust_dataset, load_base_dataset, load_cifar10, load_dataset,
    load_procedural, save_dataset,
)
from .zoo import (  # noqa: F401
    ClassifierHandle, TrainConfig, build_model, classify, evaluate_accuracy,
    load_model, save_model, train_interpolated_adversarial,
    train_pgd_adversarial, train_standard,
)
