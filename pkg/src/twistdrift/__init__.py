"""Drifting orbits across chains of twist-map annuli driven by polysystems of correspondences."""
from .annulus import (Annulus, Arc, Lift, NuBall, Point, RotationEstimate, Tilt, angle_diff, box_ball,
                      classify_tilt, make_nu_ball, rotation_number, wrap)
from .birkhoff import (birkhoff_procedure, coherent_sequence, cross_zone, crux_step, find_splitting_arc,
                       image_arc, image_tilt, transfer_search)
from .chain import (Chain, ChainLink, Itinerary, PseudoOrbit, drift, expand_itinerary, export_orbit, load_orbit,
                    replay, run_manifest, verify_chain)
from .circles import (BirkhoffZone, CertificationFailure, CertifiedCircle, certify_circle, detect_zones,
                      horizontal_circle, sweep_catalog)
from .config import build_chain, load_config
from .errors import *  # noqa: F401,F403
from .maps import ModelConfig, check_special, instantiate_model, verify_twist
from .polysystem import (PHI, PHI_INV, Corr, Correspondence, OrbitWord, Polysystem, Rect, Region, apply_word,
                         ball_shear, check_delta_bounded, equivariant_extension, global_shear, reachable_set,
                         symmetrize_word)

__version__ = "0.1.0"
