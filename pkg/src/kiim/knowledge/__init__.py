from .projection import (
    AreaStats,
    ProjectionMatrix,
    build_projection_matrix,
    count_areas,
    estimate_area_stats,
    project_crop_mask,
)
from .tables import (
    REMOVED,
    LabelMappingTable,
    UnknownLabelError,
    consolidate_irrigation_raster,
    map_crop_label,
    map_irrigation_label,
)
