"""Run configuration data model.

The configuration is one JSON document validated against the argument spec returned by
`EcgEatSpec.run_spec()`. Defaults are applied at every depth and unknown keys are rejected.
"""

import hashlib
import logging
import os
from copy import deepcopy

from ansible.module_utils.common.arg_spec import ArgumentSpecValidator
from ansible.module_utils.common.parameters import env_fallback

from ecg_eat.module_utils.errors import ArtifactError, ConfigError
from ecg_eat.module_utils.store import dumps_json, read_json

LOGGER = logging.getLogger(__name__)

DEFAULT_CLASS_RATIO = {"Normal": 1.0, "STEMI": 0.845, "HistoryMI": 0.606, "AbnormalHB": 0.820}
DEFAULT_ATTACKS = [
    {"kind": kind, "epsilon": epsilon}
    for kind in ("FGSM_STT", "PGD_STT")
    for epsilon in (0.005, 0.01, 0.02, 0.05)
]
BRANCHES = ("time", "freq", "tf", "early")
# windowed metrics default to fs / 5 samples (200 ms)
WINDOW_FS_DIVISOR = 5


class EcgEatSpec:
    """Argument specs of the run configuration, one static method per section."""

    @staticmethod
    def train_spec(max_epochs=40, lr=1e-3, patience=8):
        """Optimizer and early-stopping settings shared by every trained model."""
        return dict(
            lr=dict(type="float", default=lr),
            beta1=dict(type="float", default=0.9),
            beta2=dict(type="float", default=0.999),
            epsilon=dict(type="float", default=1e-7),
            batch=dict(type="int", default=32),
            max_epochs=dict(type="int", default=max_epochs),
            patience=dict(type="int", default=patience),
            val_fraction=dict(type="float", default=0.2),
        )

    @staticmethod
    def data_spec():
        return dict(
            n_per_class=dict(type="int", default=100),
            fs=dict(type="float", default=250.0),
            n_beats=dict(type="int", default=8),
            st_elevation_mv=dict(type="float", default=0.2),
            noise_mv=dict(type="float", default=0.02),
            class_ratio=dict(
                type="dict",
                apply_defaults=True,
                options={label: dict(type="float", default=ratio) for label, ratio in DEFAULT_CLASS_RATIO.items()},
            ),
            split=dict(type="list", elements="float", default=[0.8, 0.1, 0.1]),
        )

    @staticmethod
    def filter_spec():
        return dict(
            lo_hz=dict(type="float", default=0.5),
            hi_hz=dict(type="float", default=45.0),
            order=dict(type="int", default=4),
            zero_phase=dict(type="bool", default=True),
        )

    @staticmethod
    def denoise_spec():
        return dict(
            wavelet_levels=dict(type="int", default=4),
            threshold=dict(type="float", default=0.05),
            wavelet=dict(type="str", default="db4"),
        )

    @staticmethod
    def features_spec():
        return dict(
            time_len=dict(type="int", default=1000),
            n_bins=dict(type="int", default=128),
            cwt=dict(
                type="dict",
                apply_defaults=True,
                options=dict(
                    f_min=dict(type="float", default=1.0),
                    f_max=dict(type="float", default=40.0),
                    n_scales=dict(type="int", default=32),
                    center_freq=dict(type="float", default=1.0),
                    bandwidth=dict(type="float", default=1.5),
                    out_size=dict(type="int", default=32),
                ),
            ),
        )

    @staticmethod
    def balance_spec():
        return dict(
            method=dict(type="str", default="adasyn", choices=["adasyn", "smote", "none"]),
            k=dict(type="int", default=5),
        )

    @staticmethod
    def models_spec():
        branches = {
            name: dict(type="dict", apply_defaults=True, options=EcgEatSpec.train_spec()) for name in BRANCHES
        }
        return dict(latent_dim=dict(type="int", default=32), **branches)

    @staticmethod
    def fusion_spec():
        return dict(
            strategies=dict(
                type="list",
                elements="str",
                choices=["early", "intermediate", "late", "gated"],
                default=["early", "intermediate", "late", "gated"],
            ),
            pair=dict(type="list", elements="str", choices=["time", "freq", "tf"], default=["time", "freq"]),
            certify_pair=dict(type="list", elements="str", choices=["time", "tf"], default=["time", "tf"]),
            grid_step=dict(type="float", default=0.05),
            gate_grid_step=dict(type="float", default=0.25),
            mode=dict(type="str", default="concat", choices=["concat", "additive"]),
            warmup_epochs=dict(type="int", default=20),
            warmup_lr=dict(type="float", default=1e-3),
            train=dict(type="dict", apply_defaults=True, options=EcgEatSpec.train_spec(max_epochs=30, lr=3e-5)),
        )

    @staticmethod
    def attacks_spec():
        return dict(
            type="list",
            elements="dict",
            default=deepcopy(DEFAULT_ATTACKS),
            options=dict(
                kind=dict(type="str", required=True, choices=["FGSM_STT", "PGD_STT"]),
                epsilon=dict(type="float", required=True),
                steps=dict(type="int", default=10),
                step_size=dict(type="float", required=False),
            ),
        )

    @staticmethod
    def explain_spec():
        return dict(
            sigma=dict(type="float", default=5.0),
            ig_steps=dict(type="int", default=64),
            n_perm=dict(type="int", default=1000),
            n_resamples=dict(type="int", default=1000),
            window=dict(type="int", required=False),
            k_percent=dict(type="float", default=10.0),
            scheme=dict(type="str", default="circular_shift", choices=["circular_shift", "block_shuffle"]),
            n_bins=dict(type="int", default=16),
            smoothgrad_n=dict(type="int", default=25),
            smoothgrad_noise=dict(type="float", default=0.1),
        )

    @staticmethod
    def robustness_spec():
        return dict(
            snr_db=dict(type="float", default=15.0),
            wander_hz=dict(type="float", default=0.15),
            wander_mv=dict(type="float", default=0.3),
            muscle_band=dict(type="list", elements="float", default=[20.0, 50.0]),
            muscle_mv=dict(type="float", default=0.05),
        )

    @staticmethod
    def eat_spec():
        return dict(
            tau=dict(type="float", default=0.2),
            alpha=dict(type="float", default=0.05),
            rho=dict(type="float", default=0.05),
            gamma=dict(type="float", default=0.05),
            phi=dict(type="float", default=0.9),
            phi_arch=dict(type="float", default=0.5),
            epsilons=dict(type="list", elements="float", default=[0.005, 0.01, 0.02]),
        )

    @staticmethod
    def run_spec():
        """Defined the data model for a whole run."""

        def section(options):
            return dict(type="dict", apply_defaults=True, options=options)

        return dict(
            seed=dict(type="int", default=0, fallback=(env_fallback, ["ECG_EAT_SEED"])),
            output_dir=dict(type="path", default="runs/default", fallback=(env_fallback, ["ECG_EAT_OUTPUT"])),
            data=section(EcgEatSpec.data_spec()),
            filter=section(EcgEatSpec.filter_spec()),
            denoise=section(EcgEatSpec.denoise_spec()),
            features=section(EcgEatSpec.features_spec()),
            balance=section(EcgEatSpec.balance_spec()),
            models=section(EcgEatSpec.models_spec()),
            fusion=section(EcgEatSpec.fusion_spec()),
            attacks=EcgEatSpec.attacks_spec(),
            explain=section(EcgEatSpec.explain_spec()),
            robustness=section(EcgEatSpec.robustness_spec()),
            eat=section(EcgEatSpec.eat_spec()),
        )


# #############################################################################
# DERIVED CHECKS
# #############################################################################
def _derived_errors(config):
    """Constraints between fields that the argument spec cannot express."""
    errors = []
    data, flt, feat = config["data"], config["filter"], config["features"]
    nyquist = data["fs"] / 2.0
    if data["n_per_class"] < 1:
        errors.append("data.n_per_class must be >= 1")
    if data["fs"] < 100:
        errors.append("data.fs must be >= 100 Hz")
    if data["n_beats"] < 1:
        errors.append("data.n_beats must be >= 1")
    if any(r <= 0 for r in data["class_ratio"].values()):
        errors.append("data.class_ratio entries must be > 0")
    split = data["split"]
    if len(split) != 3 or any(s <= 0 for s in split) or abs(sum(split) - 1.0) > 1e-9:
        errors.append("data.split must be three positive fractions summing to 1")
    if not 0 < flt["lo_hz"] < flt["hi_hz"] < nyquist:
        errors.append(f"filter band must satisfy 0 < lo_hz < hi_hz < {nyquist}")
    if flt["order"] < 1:
        errors.append("filter.order must be >= 1")
    if config["denoise"]["wavelet_levels"] < 1 or config["denoise"]["threshold"] < 0:
        errors.append("denoise.wavelet_levels must be >= 1 and denoise.threshold >= 0")
    cwt = feat["cwt"]
    if not 0 < cwt["f_min"] < cwt["f_max"] < nyquist:
        errors.append(f"features.cwt band must satisfy 0 < f_min < f_max < {nyquist}")
    if feat["time_len"] < 2 * feat["n_bins"] or feat["n_bins"] < 1:
        errors.append("features.time_len must be at least twice features.n_bins")
    if config["balance"]["k"] < 1:
        errors.append("balance.k must be >= 1")
    if config["explain"]["window"] < 1:
        errors.append("explain.window must be >= 1")
    fusion = config["fusion"]
    for key in ("grid_step", "gate_grid_step"):
        if not 0 < fusion[key] <= 1:
            errors.append(f"fusion.{key} must lie in (0, 1]")
    for key in ("pair", "certify_pair"):
        if len(fusion[key]) != 2 or fusion[key][0] == fusion[key][1]:
            errors.append(f"fusion.{key} must name two different branches")
    if any(a["epsilon"] < 0 for a in config["attacks"]):
        errors.append("attack budgets must be >= 0")
    eat = config["eat"]
    budgets = eat["epsilons"]
    if not budgets or any(b <= a for a, b in zip(budgets, budgets[1:])):
        errors.append("eat.epsilons must be non-empty and strictly increasing")
    attacked = {round(a["epsilon"], 12) for a in config["attacks"]}
    uncovered = [e for e in budgets if round(e, 12) not in attacked]
    if uncovered:
        errors.append(f"eat.epsilons {uncovered} have no matching attack")
    if not 0 <= eat["tau"] <= 1 or not 0 < eat["alpha"] < 1:
        errors.append("eat.tau must lie in [0, 1] and eat.alpha in (0, 1)")
    muscle = config["robustness"]["muscle_band"]
    if len(muscle) != 2 or not 0 < muscle[0] < muscle[1] < nyquist:
        errors.append(f"robustness.muscle_band must be (lo, hi) inside (0, {nyquist})")
    return errors


def validate_config(params):
    """Validated configuration with defaults applied, or ConfigError listing every problem."""
    if not isinstance(params, dict):
        raise ConfigError("configuration must be a JSON object")
    result = ArgumentSpecValidator(EcgEatSpec.run_spec()).validate(deepcopy(params))
    if result.error_messages:
        raise ConfigError("; ".join(result.error_messages))
    config = result.validated_parameters
    if config["explain"]["window"] is None:
        config["explain"]["window"] = max(1, int(round(config["data"]["fs"] / WINDOW_FS_DIVISOR)))
    errors = _derived_errors(config)
    if errors:
        raise ConfigError("; ".join(errors))
    return config


def load_config(path=None, seed=None, output_dir=None):
    """Read, override and validate a configuration file; no path means all defaults.

    Parameters
    ----------
    path : str
        JSON document, UTF-8.
    seed : int
        Overrides both the file and ECG_EAT_SEED.
    output_dir : str
        Overrides both the file and ECG_EAT_OUTPUT.
    """
    params = {}
    if path is not None:
        try:
            params = read_json(path)
        except ArtifactError as exc:
            raise ConfigError(f"cannot load configuration: {exc}") from exc
    if seed is not None:
        params["seed"] = seed
    if output_dir is not None:
        params["output_dir"] = str(output_dir)
    config = validate_config(params)
    LOGGER.debug("configuration %s (seed %d, output %s)", config_digest(config)[:12], config["seed"],
                 config["output_dir"])
    return config


def config_digest(config):
    """SHA-256 of the canonical configuration text; output_dir is not part of it."""
    canonical = {k: v for k, v in config.items() if k != "output_dir"}
    return hashlib.sha256(dumps_json(canonical).encode("utf-8")).hexdigest()


def output_writable(path):
    """True when `path` exists as a writable directory or can be created."""
    path = os.path.abspath(path)
    while not os.path.exists(path):
        parent = os.path.dirname(path)
        if parent == path:
            return False
        path = parent
    return os.path.isdir(path) and os.access(path, os.W_OK)
