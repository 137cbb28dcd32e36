#!/usr/bin/env python3
"""
errors.py
Exception roots shared by every tool. The CLI maps InputError -> exit 2 and
NumericalError -> exit 3; library code only raises.
"""

from __future__ import annotations

from typing import Optional


class InputError(ValueError):
    """Bad input data or configuration (exit 2)."""


class SchemaError(InputError):
    pass


class ConfigError(InputError):
    pass


class PricingError(InputError):
    pass


class DimensionError(InputError):
    pass


class NumericalError(ArithmeticError):
    """Numerical failure inside a computation (exit 3)."""


class DomainError(NumericalError):
    pass


class TrainingDivergence(NumericalError):
    def __init__(self, message: str, run_id: str = "", epoch: Optional[int] = None,
                 batch: Optional[int] = None):
        where = []
        if run_id:
            where.append(f"run={run_id}")
        if epoch is not None:
            where.append(f"epoch={epoch}")
        if batch is not None:
            where.append(f"batch={batch}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.run_id = run_id
        self.epoch = epoch
        self.batch = batch
