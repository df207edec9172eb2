"""Attack graph forecasting and technique-level interpretation."""
from .graph import (AttackGraph, Edge, EntityAttr, EventType, Node, Role, SequenceEncoding,
                    from_sequence, load_graph, save_graph, to_sequence, validate_edge)

__all__ = ["AttackGraph", "Edge", "EntityAttr", "EventType", "Node", "Role", "SequenceEncoding",
           "from_sequence", "load_graph", "save_graph", "to_sequence", "validate_edge"]
