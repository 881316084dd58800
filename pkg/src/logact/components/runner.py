"""Run a component on its own thread until stopped."""

from __future__ import annotations

import logging
import threading

from ..entries import BusClosed
from .base import Component, Fenced

log = logging.getLogger(__name__)


class ComponentThread(threading.Thread):
    def __init__(self, component: Component, poll_timeout: float = 0.2, boot=None):
        super().__init__(name=f"logact-{component.component_id}", daemon=True)
        self.component = component
        self.poll_timeout = poll_timeout
        self.boot = boot
        self.stop_event = threading.Event()
        self.error: BaseException | None = None

    def run(self) -> None:
        c = self.component
        try:
            if self.boot is not None:
                self.boot(c)
            while not self.stop_event.is_set():
                if not c.step():
                    c.wait(self.poll_timeout)
        except Fenced as exc:
            log.info("%s stopped: %s", c.component_id, exc)
            self.error = exc
        except BusClosed:
            pass
        except BaseException as exc:  # noqa: BLE001 - surfaced via .error
            log.exception("%s crashed", c.component_id)
            self.error = exc

    def stop(self, timeout: float = 5.0) -> None:
        self.stop_event.set()
        self.join(timeout)
