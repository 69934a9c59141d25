"""Flat "key = value" run configuration with '#' comments.

Command-line flags override file values; unknown keys are rejected so a
stale config fails loudly. Every command prints its fully resolved
settings, making run records diffable.
"""

from pathlib import Path

from .errors import UsageError

# key -> (caster, description)
REGISTRY = {
    "n": (int, "number of phantom cases"),
    "extent": (int, "phantom volume extent (cubic)"),
    "seed": (int, "seed for init/shuffle/dropout/split/phantoms"),
    "noise_sigma": (float, "phantom intensity noise, raw units"),
    "brain_radius_frac": (float, "brain ellipsoid radius / extent"),
    "tumor_radius_lo": (float, "tumor radius range low, fraction of extent"),
    "tumor_radius_hi": (float, "tumor radius range high, fraction of extent"),
    "tumor_center_lo": (float, "tumor center range low, fraction of extent"),
    "tumor_center_hi": (float, "tumor center range high, fraction of extent"),
    "enhancing_frac": (float, "enhancing radius / tumor radius"),
    "necrosis_frac": (float, "necrotic core radius / tumor radius"),
    "min_tumor_fraction": (float, "minimum tumor voxel fraction per phantom"),
    "keep_fraction": (float, "minimum mask fraction kept by preprocessing"),
    "depth": (int, "encoder levels"),
    "base_filters": (int, "filters at the shallowest level"),
    "activation": (str, "relu or leaky_relu"),
    "min_extent": (int, "smallest volume extent the model must accept"),
    "learning_rate": (float, "Adam learning rate"),
    "batch_size": (int, "cases per optimization step"),
    "epochs": (int, "training epochs"),
    "tversky_alpha": (float, "Tversky FN weight"),
    "tversky_beta": (float, "Tversky FP weight"),
}


def load_config(path) -> dict:
    """Parse a config file into {key: raw string}, validating keys."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in REGISTRY:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve(args, file_values: dict, defaults: dict) -> dict:
    """Merge flag values over file values over defaults, casting types."""
    out = {}
    for key, default in defaults.items():
        caster, _ = REGISTRY[key]
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = caster(flag)
        elif key in file_values:
            try:
                out[key] = caster(file_values[key])
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
        else:
            out[key] = default
    return out


def print_resolved(command: str, settings: dict) -> None:
    print(f"[{command}] resolved configuration:")
    for key in sorted(settings):
        print(f"  {key} = {settings[key]}")
