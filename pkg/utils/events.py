import logging
from typing import Any, Callable, Dict, List

logger = logging.getLogger(__name__)

# Events published by the SAC trainer
TRAINING_STARTED = 'training-started'
EVALUATED = 'evaluated'
CHECKPOINTED = 'checkpointed'
EPISODE_FINISHED = 'episode-finished'
TRAINING_FINISHED = 'training-finished'


class EventEmitter:
    """Synchronous publish/subscribe helper used by long-running loops."""

    def __init__(self):
        self.callbacks: Dict[str, List[Callable[[Any], None]]] = {}

    def on(self, event_name: str, callback: Callable[[Any], None]) -> None:
        """Register an event callback"""
        self.callbacks.setdefault(event_name, []).append(callback)

    def emit(self, event_name: str, data: Any = None) -> None:
        """
        Emit an event with optional data.

        A failing listener is logged and skipped so that a broken progress hook
        cannot abort a training run.
        """
        for callback in list(self.callbacks.get(event_name, [])):
            try:
                callback(data)
            except Exception as error:
                logger.error(f"Listener for '{event_name}' failed: {error}")
