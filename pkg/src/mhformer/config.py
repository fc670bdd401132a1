"""Model and training hyperparameters."""

from dataclasses import asdict, dataclass, fields

import numpy as np


class ConfigError(ValueError):
    pass


CHI_ROLES = ("cyclic", "reverse")


@dataclass
class ModelConfig:
    """Hyperparameters of the multi-hypothesis lifting network.

    ``mlp_ratio`` sets every MLP hidden width: ``mlp_ratio * N`` inside the
    spatial encoder layers and ``mlp_ratio * C`` inside the hypothesis-mixing
    MLPs (whose input/output width is ``C * M``).
    """

    M: int = 3
    N: int = 27
    J: int = 17
    C: int = 512
    L1: int = 4
    L2: int = 2
    L3: int = 1
    h_s: int = 9
    h_t: int = 8
    mlp_ratio: float = 2.0
    ln_eps: float = 1e-5
    dropout: float = 0.0
    dtype: str = "float32"
    mhg_parallel: bool = False
    chi_roles: str = "cyclic"
    chi_any_m: bool = False
    hyp_heads: bool = False

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def spatial_hidden(self):
        return int(round(self.mlp_ratio * self.N))

    @property
    def mix_hidden(self):
        return int(round(self.mlp_ratio * self.C))

    def validate(self, for_forward=True):
        for name in ("M", "N", "J", "C", "h_s", "h_t"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("L1", "L2", "L3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.L3 < 1:
            raise ConfigError("L3 must be >= 1 (the last cross-hypothesis layer aggregates)")
        if self.N % 2 == 0:
            raise ConfigError(f"N must be odd, got {self.N}")
        if self.N % self.h_s:
            raise ConfigError(f"h_s={self.h_s} must divide N={self.N}")
        if self.C % self.h_t:
            raise ConfigError(f"h_t={self.h_t} must divide C={self.C}")
        for prod, what in ((self.mlp_ratio * self.N, "mlp_ratio*N"), (self.mlp_ratio * self.C, "mlp_ratio*C")):
            if abs(prod - round(prod)) > 1e-9 or round(prod) < 1:
                raise ConfigError(f"{what} must be a positive integer, got {prod}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.chi_roles not in CHI_ROLES:
            raise ConfigError(f"chi_roles must be one of {CHI_ROLES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if for_forward and self.M != 3 and not self.chi_any_m:
            raise ConfigError("cross-hypothesis interaction needs M == 3 unless chi_any_m is set")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    epoch_decay: float = 0.95
    every5_decay: float = 0.5
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    flip_prob: float = 0.5
    normalize_loss: bool = True
    squared_loss: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hyp_aux_weight: float = 0.0

    def validate(self):
        for name in ("epoch_decay", "every5_decay"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


def _from_dict(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def tiny_config(**overrides):
    """The small float64 configuration used for gradient and oracle checks."""
    base = dict(M=3, N=9, J=2, C=8, L1=1, L2=1, L3=1, h_s=3, h_t=2, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)
