"""Tuned hyperparameter presets and sweep grids.

The benchmark presets encode the published optima of the (mu0, gamma)
grid searches for two student backbones on three datasets, separately
for student-only and student+teacher training, plus the default
distillation weights. Toy presets drive the shipped synthetic dataset.
"""

from __future__ import annotations

from .exceptions import UnknownPresetError

# grid axes used by the (mu0, gamma) searches
LR_GRID_MU0 = (1e-1, 5e-2, 1e-2, 5e-3)
LR_GRID_GAMMA = (5e-4, 5e-5, 5e-6)

# second-stage temperature sweep values
TAU_GRID = (1.0, 2.0, 3.0, 4.0, 6.0, 8.0)

# per-term weight sweep grids
LAMBDA_PA_GRID = (1e-3, 1e-2, 1e-1, 1e0, 1e1)
LAMBDA_HO_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
LAMBDA_IFV_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 5e1, 1e2)

# default loss weights (each term's published best on the ResNet student)
DEFAULT_LAMBDA_PI = 1e-1
DEFAULT_LAMBDA_PA = 1e-1
DEFAULT_LAMBDA_HO = 1e-2
DEFAULT_LAMBDA_IFV = 1e-2

DATASETS = ("pascalvoc", "cityscapes", "ade20k")
STUDENTS = ("effnet", "resnet")

# (dataset, student) -> (mu0, gamma), student trained without a teacher
STUDENT_ONLY_OPTIMA = {
    ("pascalvoc", "effnet"): (1e-2, 5e-4),
    ("cityscapes", "effnet"): (1e-1, 5e-6),
    ("ade20k", "effnet"): (5e-3, 5e-5),
    ("pascalvoc", "resnet"): (5e-3, 5e-4),
    ("cityscapes", "resnet"): (1e-2, 5e-4),
    ("ade20k", "resnet"): (1e-2, 5e-5),
}

# (dataset, student) -> (mu0, gamma), student + teacher at tau = 1
KD_OPTIMA = {
    ("pascalvoc", "effnet"): (1e-2, 5e-6),
    ("cityscapes", "effnet"): (5e-2, 5e-6),
    ("ade20k", "effnet"): (1e-2, 5e-5),
    ("pascalvoc", "resnet"): (5e-3, 5e-5),
    ("cityscapes", "resnet"): (1e-2, 5e-4),
    ("ade20k", "resnet"): (1e-2, 5e-5),
}

DATASET_INFO = {
    "pascalvoc": {"class_count": 21, "crop_size": 473},
    "cityscapes": {"class_count": 19, "crop_size": 512},
    "ade20k": {"class_count": 150, "crop_size": 473},
}

STUDENT_MODELS = {
    "effnet": "pspnet_efficientnet_b0",
    "resnet": "pspnet_resnet18",
}
TEACHER_MODEL = "pspnet_resnet101"

# seed counts for sweep aggregation; ADE20K results come from single runs
DEFAULT_SEEDS = (0, 1, 2)
ADE20K_SEEDS = (0,)


def _benchmark_preset(dataset: str, student: str, kd: bool) -> dict:
    mu0, gamma = (KD_OPTIMA if kd else STUDENT_ONLY_OPTIMA)[(dataset, student)]
    info = DATASET_INFO[dataset]
    preset = {
        "dataset": {
            "root": None,  # licensed data; point at a local copy
            "name": dataset,
            "class_count": info["class_count"],
            "crop_size": info["crop_size"],
        },
        "model": {"name": STUDENT_MODELS[student], "init": {"mode": "random", "seed": 0}},
        "teacher": {"checkpoint": None},
        "train": {
            "mu0": mu0,
            "gamma": gamma,
            "batch_size": 8,
            "eta": None,  # total batches; depends on compute budget
            "temperature": 1.0,
            "loss_weights": {"pi": DEFAULT_LAMBDA_PI if kd else 0.0,
                             "pa": 0.0, "ho": 0.0, "ifv": 0.0},
            "seed": 0,
            "eval_interval": 500,
        },
    }
    return preset


def _toy_preset(kd: bool, full: bool = False) -> dict:
    weights = {"pi": 0.0, "pa": 0.0, "ho": 0.0, "ifv": 0.0}
    if kd:
        weights["pi"] = DEFAULT_LAMBDA_PI
    if full:
        weights.update(
            {"pa": DEFAULT_LAMBDA_PA, "ho": DEFAULT_LAMBDA_HO, "ifv": DEFAULT_LAMBDA_IFV}
        )
    return {
        "dataset": {"root": "data/toy", "name": "toy", "class_count": 4, "crop_size": 64},
        "model": {"name": "toy_student", "init": {"mode": "random", "seed": 0}},
        "teacher": {"checkpoint": None},
        "train": {
            "mu0": 0.05,
            "gamma": 5e-4,
            "batch_size": 8,
            "eta": 300,
            "temperature": 1.0,
            "loss_weights": weights,
            "seed": 0,
            "eval_interval": 100,
        },
    }


def _toy_teacher_preset() -> dict:
    preset = _toy_preset(kd=False)
    preset["model"] = {"name": "toy_teacher", "init": {"mode": "random", "seed": 0}}
    preset["train"].update({"mu0": 0.05, "gamma": 5e-4, "eta": 800})
    return preset


def _build_presets() -> dict[str, dict]:
    presets = {}
    for dataset in DATASETS:
        for student in STUDENTS:
            presets[f"{dataset}-{student}-student"] = _benchmark_preset(
                dataset, student, kd=False
            )
            presets[f"{dataset}-{student}-kd"] = _benchmark_preset(
                dataset, student, kd=True
            )
    presets["toy-student-only"] = _toy_preset(kd=False)
    presets["toy-kd"] = _toy_preset(kd=True)
    presets["toy-kd-full"] = _toy_preset(kd=True, full=True)
    presets["toy-teacher"] = _toy_teacher_preset()
    return presets


PRESETS = _build_presets()


def preset_names() -> list[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> dict:
    """Deep copy of the named preset; unknown names list the alternatives."""
    if name not in PRESETS:
        raise UnknownPresetError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}"
        )
    import copy

    return copy.deepcopy(PRESETS[name])


def seeds_for_dataset(dataset: str) -> tuple[int, ...]:
    return ADE20K_SEEDS if dataset == "ade20k" else DEFAULT_SEEDS
