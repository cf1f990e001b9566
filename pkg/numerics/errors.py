#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


class SemshotError(Exception):
    pass


class ShapeError(SemshotError, ValueError):
    pass


class ConfigError(SemshotError, ValueError):
    pass


class DataError(SemshotError, ValueError):
    pass


class NumericError(SemshotError, ArithmeticError):
    pass
