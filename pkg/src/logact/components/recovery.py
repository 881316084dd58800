"""Boot paths shared by live starts and restarts after a crash."""

from __future__ import annotations

import logging

from ..entries import Mail
from .base import Component

log = logging.getLogger(__name__)


def recover_component(component: Component) -> Component:
    """Restore the latest snapshot (if any) and replay the suffix."""
    restored = component.restore()
    start = component.played_up_to
    n = component.catch_up()
    log.info("%s recovered: snapshot=%s, replayed %d entries from %d", component.component_id, restored, n, start)
    return component


def driver_elect(driver) -> int:
    """Recover a driver and take over leadership; returns the epoch won."""
    recover_component(driver)
    return driver.elect()


def send_mail(client, body: str, sender: str | None = None) -> int:
    return client.append(Mail(sender or client.client_id, body))
