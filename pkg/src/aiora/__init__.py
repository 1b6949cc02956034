"""Orchestration engine for multi-segment edge-cloud continuums."""

from aiora.broker import ResourceBroker
from aiora.lifecycle import LifecycleManager
from aiora.model import ResourceVector, Topology
from aiora.placement import ApplicationDescriptor, ObjectiveWeights, place

__version__ = "0.1.0"

__all__ = [
    "ApplicationDescriptor",
    "LifecycleManager",
    "ObjectiveWeights",
    "ResourceBroker",
    "ResourceVector",
    "Topology",
    "place",
]
