#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from typing import BinaryIO
from unittest.mock import Mock, call

from training.stats import CsvLossCurveCollector, NullLossCurveCollector


def test_csv_loss_curve_collector():
    mocked_file: Mock = Mock(spec=BinaryIO)
    mocked_file.closed = False
    collector = CsvLossCurveCollector(output_file=mocked_file)

    collector.register_epoch(epoch=1, loss=2.5)
    collector.register_epoch(epoch=2, loss=0.125)
    collector.close()
    collector.register_epoch(epoch=3, loss=0.0625)

    assert mocked_file.write.call_args_list == [
        call(b'epoch,loss\n'),
        call(b'1,2.5\n'),
        call(b'2,0.125\n'),
    ]
    mocked_file.close.assert_called_once_with()


def test_null_loss_curve_collector():
    # NullLossCurveCollector is just a stub, we test it only to keep sane
    # coverage metrics.
    collector = NullLossCurveCollector()
    collector.register_epoch(epoch=1, loss=1.0)
    collector.close()
