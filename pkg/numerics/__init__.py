#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from typing import Dict

import numpy as np

# Every numeric carrier is a dense row-major ndarray; model paths use float32.
Tensor = np.ndarray
TensorMap = Dict[str, np.ndarray]

MAX_RANK = 4
