"""Deterministic simulation of the P2P RTC tracking attack pipeline:
call-pattern IP extraction, scalable mobility tracking, and BitTorrent
linkage verification over the IP-ID side channel."""

__version__ = "0.1.0"
