"""One-stop assembly of the control plane.

Everything shares a single database and blob store under one root
directory.  The drift loop is closed here: monitor events land on the
orchestrator's trigger queue, and the deploy stage reaches back into
serving and monitoring.
"""

from __future__ import annotations

from pathlib import Path

from .config import PlatformConfig
from .embedfarm import EmbedFarm
from .errors import Unauthorized
from .feedback import FeedbackStore
from .governance import AccessControl
from .monitor import Monitor
from .orchestrator import Orchestrator
from .registry import BlobStore, Registry
from .serving import ServingLayer
from .storage import Database


class Platform:
    def __init__(self, root: str | Path, config: PlatformConfig | None = None):
        self.root = Path(root)
        self.config = config or PlatformConfig()
        self.db = Database(self.root / "saturn.db")
        self.blobs = BlobStore(self.root / "blobs", self.db)
        self.tokens = self.config.tokens()  # token -> principal
        self.acl = AccessControl(self.db, admins=set(self.config.admins()))
        # with no tokens configured the deployment is open and role
        # checks stay off, which is the single-operator default
        acl = self.acl if self.tokens else None
        self.registry = Registry(self.db, self.blobs, acl=acl)
        self.farm = EmbedFarm(self.db)
        self.monitor = Monitor(self.db, webhook_url=self.config.webhook_url)
        self.serving = ServingLayer(
            self.db, self.registry, self.monitor,
            acl=acl, tokens=self.tokens,
            refreeze_on_rebind=self.config.refreeze_on_rebind,
        )
        self.feedback = FeedbackStore(self.db, self.blobs)
        self.orchestrator = Orchestrator(
            self.db, self.registry, self.serving, self.monitor,
            root=self.root, gate_defaults=self.config.gate_defaults(),
            acl=acl,
        )
        self.monitor.event_sinks.append(self.orchestrator.handle_drift_event)

    @classmethod
    def from_config_file(cls, root: str | Path, path: str | Path) -> "Platform":
        return cls(root, PlatformConfig.from_file(path))

    @property
    def auth_enabled(self) -> bool:
        return bool(self.tokens)

    def principal_for(self, token: str | None) -> str | None:
        """Resolve a bearer token, or None when auth is off."""
        if not self.auth_enabled:
            return None
        principal = self.tokens.get(token or "")
        if principal is None:
            raise Unauthorized("unknown bearer token")
        return principal

    def close(self) -> None:
        self.db.close()
