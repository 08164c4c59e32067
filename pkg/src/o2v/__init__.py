"""Online open-vocabulary voxel mapping.

Builds a neural implicit scene from posed RGBD frames on a sparse voxel
grid, fuses open-vocabulary language features into the same voxels, and
answers free-text object queries against the finished map.

The pieces most users need:

    Mapper / MapConfig      the online frame loop and its knobs
    save_map / load_map     map container I/O
    render_view             re-render RGBD from a snapshot
    render_relevance        per-pixel response to a text query
    MapService              TCP query/render service over live snapshots
"""

from .config import MapConfig
from .mapping import Mapper
from .scene import CameraIntrinsics, Pose, RGBDFrame, SceneBounds
from .service import MapService
from .snapshot import MapSnapshot, load_map, map_equal, save_map
from .views import RelevanceMap, render_relevance, render_view

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "MapConfig",
    "MapService",
    "MapSnapshot",
    "Mapper",
    "Pose",
    "RGBDFrame",
    "RelevanceMap",
    "SceneBounds",
    "load_map",
    "map_equal",
    "render_relevance",
    "render_view",
    "save_map",
    "__version__",
]
