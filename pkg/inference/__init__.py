#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


# Temperature of every similarity softmax (image-text logit scale).
DEFAULT_TAU = 0.07

# Weight of the head probability when fused with the similarity probability.
DEFAULT_ALPHA = 0.8
