"""Model handle tying encoder, posterior, prior and decoder together.

``GvaeModel`` is the runtime object the training loop and the evaluation
protocols share: configuration plus named parameters, with checkpointing in
the manifest + params.bin format.  ``LogicGvae`` wraps it in a scikit-learn
style estimator (fit / transform / inverse_transform), where transform maps
formulae to posterior means and inverse_transform greedily decodes latent
vectors back to formulae.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import decoder as dec
from . import encoder as enc
from .autodiff import ModelParams
from .errors import ConfigError, DataError
from .formulas import Formula, parse
from .graphs import to_ast_graph
from .semantics import PcaModel

VAE = "vae"
CVAE = "cvae"


@dataclass(frozen=True)
class ModelConfig:
    encoder: enc.EncoderConfig
    mode: str = VAE
    context_size: int = 0
    condition_posterior: bool = True
    max_v: int = 30

    def validate(self) -> None:
        self.encoder.validate()
        if self.mode not in (VAE, CVAE):
            raise ConfigError(f"unknown model mode {self.mode!r}")
        if self.mode == CVAE and self.context_size < 1:
            raise ConfigError("cvae mode needs a positive context size")
        if self.mode == VAE and self.context_size != 0:
            raise ConfigError("vae mode must not carry a context size")
        if self.max_v < 1:
            raise ConfigError("max_v must be positive")

    @property
    def posterior_context(self) -> int:
        if self.mode == CVAE and self.condition_posterior:
            return self.context_size
        return 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["encoder"]["gat_heads"] = list(self.encoder.gat_heads)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        enc_data = dict(data["encoder"])
        enc_data["gat_heads"] = tuple(enc_data.get("gat_heads", ()))
        return cls(
            encoder=enc.EncoderConfig(**enc_data),
            mode=data["mode"],
            context_size=data["context_size"],
            condition_posterior=data["condition_posterior"],
            max_v=data["max_v"],
        )


def init_model_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    cfg.validate()
    params = ModelParams()
    enc.init_encoder_params(params, cfg.encoder, rng)
    enc.init_posterior_params(params, cfg.encoder, cfg.posterior_context, rng)
    if cfg.mode == CVAE:
        enc.init_prior_params(params, cfg.encoder, cfg.context_size, rng)
    dec.init_decoder_params(params, cfg.encoder, cfg.context_size, rng)
    return params


class GvaeModel:
    """Configuration plus parameters, with the forward passes both the
    trainer and the evaluation protocols need."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        config.validate()
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "GvaeModel":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11)))
        return cls(config, init_model_params(config, rng))

    # -- encoder side -----------------------------------------------------

    def posterior_for(self, f: Formula, y: np.ndarray | None = None) -> enc.PosteriorGaussian:
        self._check_context(y)
        graph = to_ast_graph(f, self.config.encoder.n_vars)
        out_e = enc.encode(graph, self.params, self.config.encoder)
        y_post = y if self.config.posterior_context else None
        return enc.posterior(out_e, y_post, self.params)

    def posterior_np(self, f: Formula, y: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        q = self.posterior_for(f, y)
        return q.mu.value.copy(), q.logvar.value.copy()

    def prior_np(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.config.mode != CVAE:
            raise ConfigError("parametric prior exists only in cvae mode")
        p = enc.prior_conditional(np.asarray(y, dtype=np.float64), self.params)
        return p.mu.value.copy(), p.logvar.value.copy()

    # -- decoder side -----------------------------------------------------

    def decode_trace(
        self,
        z,
        y: np.ndarray | None = None,
        mode: str = dec.SAMPLE,
        rng: np.random.Generator | None = None,
        teacher: Formula | None = None,
        constrained: bool = True,
        max_v: int | None = None,
    ) -> dec.DecodeTrace:
        self._check_context(y)
        return dec.decode(
            z,
            self.params,
            self.config.encoder,
            y=y,
            max_v=max_v if max_v is not None else self.config.max_v,
            mode=mode,
            rng=rng,
            teacher=teacher,
            constrained=constrained,
        )

    def _check_context(self, y) -> None:
        if self.config.mode == CVAE and y is None:
            raise ConfigError("cvae model needs a context vector y")
        if self.config.mode == VAE and y is not None:
            raise ConfigError("vae model does not take a context vector")

    # -- persistence -------------------------------------------------------

    def save(self, directory: str) -> None:
        ad.save_params(directory, self.params, {"model": self.config.to_dict()})

    @classmethod
    def load(cls, directory: str) -> "GvaeModel":
        params, config = ad.load_params(directory)
        if "model" not in config:
            raise DataError(f"{directory}: checkpoint manifest carries no model config")
        try:
            model_cfg = ModelConfig.from_dict(config["model"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"{directory}: malformed model config ({exc})") from exc
        return cls(model_cfg, params)


def require_mode(model: GvaeModel, mode: str, protocol: str) -> None:
    """Protocol guard: evaluation refuses checkpoints of the wrong kind."""
    if model.config.mode != mode:
        raise ConfigError(
            f"{protocol} needs a {mode} checkpoint, got {model.config.mode}"
        )


class LogicGvae(BaseEstimator):
    """Grammar-constrained graph VAE over propositional formulae.

    ``fit`` trains on a list of formulae (or canonical strings); ``transform``
    returns posterior means, ``inverse_transform`` decodes latent vectors
    greedily, and ``sample`` draws new formulae from the prior.  In cvae mode
    pass a fitted kernel-PCA model so formulae can be conditioned on their
    semantic context vectors.
    """

    def __init__(
        self,
        cell: str = "gru",
        layers: int | None = None,
        gat_heads: tuple[int, ...] | None = None,
        bidirectional: bool = True,
        hidden_size: int = 64,
        latent_size: int = 16,
        n_vars: int = 3,
        mode: str = VAE,
        condition_posterior: bool = True,
        max_v: int = 30,
        beta: float = 1e-3,
        lr: float = 1e-3,
        batch_size: int = 32,
        validate_every: int = 30,
        patience: int = 3,
        max_epochs: int = 300,
        seed: int = 0,
    ):
        self.cell = cell
        self.layers = layers
        self.gat_heads = gat_heads
        self.bidirectional = bidirectional
        self.hidden_size = hidden_size
        self.latent_size = latent_size
        self.n_vars = n_vars
        self.mode = mode
        self.condition_posterior = condition_posterior
        self.max_v = max_v
        self.beta = beta
        self.lr = lr
        self.batch_size = batch_size
        self.validate_every = validate_every
        self.patience = patience
        self.max_epochs = max_epochs
        self.seed = seed

    def _encoder_config(self) -> enc.EncoderConfig:
        base = enc.default_encoder_config(
            self.cell, self.n_vars, hidden_size=self.hidden_size,
            latent_size=self.latent_size, bidirectional=self.bidirectional,
        )
        layers = self.layers if self.layers is not None else base.layers
        heads = self.gat_heads if self.gat_heads is not None else base.gat_heads
        if self.cell != "gat":
            heads = ()
        return enc.EncoderConfig(
            cell=self.cell, layers=layers, gat_heads=tuple(heads),
            bidirectional=self.bidirectional, hidden_size=self.hidden_size,
            latent_size=self.latent_size, n_vars=self.n_vars,
        )

    def fit(self, X, y=None, pca: PcaModel | None = None):
        from .training import TrainConfig, train

        formulas = self._as_formulas(X)
        cfg = TrainConfig(
            beta=self.beta, lr=self.lr, batch_size=self.batch_size,
            validate_every=self.validate_every, patience=self.patience,
            max_epochs=self.max_epochs, seed=self.seed, mode=self.mode,
        )
        result = train(formulas, cfg, self._encoder_config(), pca=pca,
                       max_v=self.max_v,
                       condition_posterior=self.condition_posterior)
        self.model_ = result.model
        self.history_ = result.history
        self.pca_ = pca
        return self

    def transform(self, X) -> np.ndarray:
        model = self._fitted()
        out = []
        for f in self._as_formulas(X):
            y = self._context_of(f)
            mu, _ = model.posterior_np(f, y)
            out.append(mu)
        return np.asarray(out)

    def inverse_transform(self, Z, contexts: np.ndarray | None = None) -> list[Formula | None]:
        model = self._fitted()
        out = []
        for i, z in enumerate(np.asarray(Z, dtype=np.float64)):
            y = None if contexts is None else contexts[i]
            if model.config.mode == CVAE and y is None:
                raise ConfigError("cvae decoding needs per-row contexts")
            out.append(model.decode_trace(z, y=y, mode=dec.GREEDY).formula)
        return out

    def sample(self, n_samples: int, seed: int = 0) -> list[Formula | None]:
        model = self._fitted()
        require_mode(model, VAE, "prior sampling")
        out = []
        for i in range(n_samples):
            rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
            z = rng.standard_normal(model.config.encoder.latent_size)
            out.append(model.decode_trace(z, mode=dec.SAMPLE, rng=rng).formula)
        return out

    def _context_of(self, f: Formula) -> np.ndarray | None:
        if self.mode != CVAE:
            return None
        if self.pca_ is None:
            raise ConfigError("cvae estimator fitted without a pca model")
        from .semantics import embed

        return embed(f, self.pca_)

    def _as_formulas(self, X) -> list[Formula]:
        out = []
        for item in X:
            if isinstance(item, Formula):
                out.append(item)
            elif isinstance(item, str):
                out.append(parse(item, self.n_vars))
            else:
                raise TypeError(f"expected Formula or str, got {type(item).__name__}")
        return out

    def _fitted(self) -> GvaeModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("LogicGvae must be fitted first")
        return self.model_
