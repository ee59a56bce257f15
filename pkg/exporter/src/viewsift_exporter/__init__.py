"""Backbone hook exporter for the viewsift toolkit."""

from .backbone import BackboneOutputs, TinyAlternatingBackbone, load_backbone
from .export import ExportConfig, export_predictions, export_representations

__version__ = "0.1.0"
