#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


GOOD_CLASS = 'good'

# Column order of every class-indexed output ("good" first).
DEFAULT_CLASSES = (
    GOOD_CLASS,
    'bridge',
    'copper_residue',
    'hole',
    'infilm',
    'particle',
    'scratch',
)
