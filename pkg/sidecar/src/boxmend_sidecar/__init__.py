"""Sidecar worker answering boxmend segment/score requests over stdio."""

__version__ = "0.1.0"

PROTOCOL_ID = "boxmend/1"
