"""Layered body and garment geometry: skinned body, garment shape space, weights, losses, fitting."""

from .body import BodyModel, Pose, body_mesh, lbs, load_body_model, save_body_model
from .garment import (GarmentParams, GarmentTemplate, garment_mesh, garment_rest, load_template,
                      save_template, transfer_garment)
from .mesh import Mesh, load_obj, save_obj
from .transfer import TransferConfig, idw_transfer

__version__ = "0.1.0"
