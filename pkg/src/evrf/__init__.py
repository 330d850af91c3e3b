"""Radiance fields from motion-blurred images and event streams."""

from .events import (AttentionMask, BinSet, Event, EventFormatError, EventStream, read_events, signed_counts,
                     spatial_mask, split_by_count, split_by_time, time_weights, write_events)
from .motion import CameraPose, Intrinsics, Trajectory, interpolate_pose, local_b, reproject, view_offset

__version__ = "0.1.0"
