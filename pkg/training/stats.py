#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from abc import ABCMeta, abstractmethod
from typing import BinaryIO


class LossCurveCollector(metaclass=ABCMeta):
    @abstractmethod
    def register_epoch(self, epoch: int, loss: float):
        raise NotImplementedError

    @abstractmethod
    def close(self):
        pass


class CsvLossCurveCollector(LossCurveCollector):
    """It dumps one `epoch,loss` row per training epoch to a CSV file."""

    def __init__(self, output_file: BinaryIO):
        self.output_file = output_file
        self.running = True
        self.output_file.write(b'epoch,loss\n')

    def register_epoch(self, epoch: int, loss: float):
        if not self.running:
            return

        self.output_file.write(f'{epoch},{loss:.9g}\n'.encode())

    def close(self):
        if not self.running:
            return

        self.running = False

        if (
            self.output_file is not None and
            not self.output_file.closed
        ):
            self.output_file.close()


class NullLossCurveCollector(LossCurveCollector):
    def register_epoch(self, epoch: int, loss: float):
        pass

    def close(self):
        pass
