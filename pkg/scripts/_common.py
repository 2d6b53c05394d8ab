"""Shared argument handling for the experiment scripts."""

import argparse
import logging

from vglab.config import Settings


def parser(description: str, default_out: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default=default_out, help="output directory for tables and run folders")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def settings(args, **defaults) -> Settings:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    base = [f"{k}={v}" for k, v in defaults.items()]
    return Settings.from_sources(args.config, base + list(args.set))
