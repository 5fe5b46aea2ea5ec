"""Inverse adversarial training on small models: attacks, universal inverse perturbations, UIAT/IAT objectives."""

from iat.attacks import AttackConfig, linf_project, pgd_attack, single_step_attack
from iat.autodiff import Tensor, Trace, backward
from iat.datasets import Dataset, gaussian_blobs, load_idx, two_moons
from iat.inverse import InverseConfig, UniversalBank, apply_universal, instance_inverse, universal_update
from iat.models import ForwardOutput, NetworkSpec, NetworkState, forward, init
from iat.trainer import TrainConfig, train

__version__ = "0.1.0"
