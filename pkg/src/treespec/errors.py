"""Exception hierarchy shared by every treespec module."""

from __future__ import annotations


class TreespecError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(TreespecError):
    """A caller broke an operation's precondition."""


class ConsistencyViolation(TreespecError):
    """Draft and target state diverged; decoding cannot continue."""


class CapacityError(TreespecError):
    """A KV store would exceed its configured capacity."""


class ChannelError(TreespecError):
    """Base class for LL channel failures."""


class ChannelOverrun(ChannelError):
    """Producer attempted to reuse a slot the consumer has not drained."""


class MessageTooLarge(ChannelError):
    """Encoded message does not fit in the ring."""


class ProtocolError(ChannelError):
    """Consumer decoded a malformed header."""


class ChannelTimeout(ChannelError):
    """Polling exceeded the caller's budget."""


class ConfigError(TreespecError):
    """Config file or CLI flags failed validation."""
