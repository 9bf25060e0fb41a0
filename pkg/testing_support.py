"""
Script-mode runner shared by the test_*.py files (`python test_svm.py`).

pytest collects the same functions; this only prints the emoji summary.
Tests marked slow or dataset are skipped unless --slow / --dataset is given.
"""

import inspect
import logging
import sys
import time
import traceback
from typing import Dict

import pytest


def _marks(fn) -> set:
    return {mark.name for mark in getattr(fn, "pytestmark", [])}


def run_tests(namespace: Dict[str, object], title: str) -> int:
    logging.basicConfig(level=logging.WARNING)
    enabled = {flag.lstrip("-") for flag in sys.argv[1:]}

    print(f"🧪 {title}")
    print("=" * 50)

    tests = [(name, fn) for name, fn in namespace.items()
             if name.startswith("test_") and inspect.isfunction(fn)]
    passed = failed = skipped = 0
    for name, fn in tests:
        gated = _marks(fn) & {"slow", "dataset"}
        if gated - enabled:
            print(f"⏭️  {name} (marked {', '.join(sorted(gated))})")
            skipped += 1
            continue
        started = time.perf_counter()
        try:
            fn()
        except pytest.skip.Exception as e:
            print(f"⏭️  {name}: {e}")
            skipped += 1
        except Exception:
            print(f"❌ {name}")
            traceback.print_exc()
            failed += 1
        else:
            print(f"✅ {name} ({time.perf_counter() - started:.2f}s)")
            passed += 1

    print("=" * 50)
    print(f"📊 {passed} passed, {failed} failed, {skipped} skipped")
    return 1 if failed else 0
