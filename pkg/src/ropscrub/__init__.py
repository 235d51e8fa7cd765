"""ropscrub: remove ret-family ROP gadgets from x86-64 assembly and measure the effect.

Three rewrite techniques (return-address encryption, nop-sled realignment,
immediate re-encoding) plus a gadget scanner to audit raw bytes and ELF
executables before/after.
"""

__version__ = "0.1.0"

REWRITE_HEADER_PREFIX = "# ropscrub-rewritten v"
REWRITE_HEADER = REWRITE_HEADER_PREFIX + __version__
