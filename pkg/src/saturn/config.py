"""Flat key=value configuration.

One tiny format serves both the platform config file and pipeline training
spec files: one ``key=value`` pair per line, ``#`` comments, keys namespaced
with dots (``serve.port``, ``pipeline.gate.min_accuracy``).  Values stay
strings; callers coerce where needed.
"""

from __future__ import annotations

from pathlib import Path

from .errors import InvalidInput


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse flat key=value text into a dict, rejecting malformed lines."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidInput(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise InvalidInput(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def load_flat_config(path: str | Path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise InvalidInput(f"config file not found: {p}")
    return parse_flat_config(p.read_text(encoding="utf-8"))


def _as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InvalidInput(f"not a boolean: {value!r}")


class PlatformConfig:
    """Typed view over the flat config keys the platform understands.

    Unknown keys are kept verbatim so operator files can carry extra
    deployment metadata without breaking.
    """

    def __init__(self, values: dict[str, str] | None = None):
        self.values = dict(values or {})

    @classmethod
    def from_file(cls, path: str | Path) -> "PlatformConfig":
        return cls(load_flat_config(path))

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.values.get(key, default)

    def get_float(self, key: str, default: float) -> float:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise InvalidInput(f"config {key}: not a number: {raw!r}") from None

    def get_int(self, key: str, default: int) -> int:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise InvalidInput(f"config {key}: not an integer: {raw!r}") from None

    def get_bool(self, key: str, default: bool) -> bool:
        raw = self.values.get(key)
        if raw is None:
            return default
        return _as_bool(raw)

    # Named accessors for the documented keys.

    @property
    def webhook_url(self) -> str | None:
        return self.values.get("monitor.webhook_url")

    @property
    def refreeze_on_rebind(self) -> bool:
        return self.get_bool("serve.refreeze_on_rebind", True)

    @property
    def serve_port(self) -> int:
        return self.get_int("serve.port", 8314)

    @property
    def pipeline_workers(self) -> int:
        return self.get_int("pipeline.workers", 1)

    def gate_defaults(self) -> dict[str, float]:
        return {
            "min_accuracy": self.get_float("pipeline.gate.min_accuracy", 0.8),
            "min_auc": self.get_float("pipeline.gate.min_auc", 0.8),
            "max_fairness_dpd": self.get_float("pipeline.gate.max_fairness_dpd", 0.1),
        }

    def tokens(self) -> dict[str, str]:
        """Map bearer token -> principal, from ``serve.token.<principal>=<token>``."""
        out: dict[str, str] = {}
        for key, value in self.values.items():
            if key.startswith("serve.token."):
                principal = key[len("serve.token."):]
                if principal and value:
                    out[value] = principal
        return out

    def admins(self) -> list[str]:
        raw = self.values.get("governance.admins", "")
        return [p.strip() for p in raw.split(",") if p.strip()]
