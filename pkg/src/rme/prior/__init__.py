"""Neural prior over payload parameters, computed from end-effector pseudo-wrenches."""

from rme.prior.model import PriorModel, load_prior, preprocess, subsample_indices

__all__ = ["PriorModel", "load_prior", "preprocess", "subsample_indices"]
