"""Differentiable log-posterior models over unconstrained parameters."""

from .base import BaseModel, DerivedQuantities, ModelConfig
from .cs import CSModel
from .csfv import CSFVModel
from .input import InputError, ModelInput, from_json_dict, load_json, save_json, to_json_dict
from .mv import MVModel
from .ops import fitted_cv2, mixture_variance, variance_match_phi2
from .transforms import Block, ParamLayout

MODELS = {"cs": CSModel, "cs-fv": CSFVModel, "mv": MVModel}


def build_model(name, data, config=None):
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(MODELS)}")
    return cls(data, config)
