"""Multilevel feature fusion network with coordinate attention, in numpy."""

from treeradar.mlff.net import MLFFNet, NetConfig, toy_config

__all__ = ["MLFFNet", "NetConfig", "toy_config"]
