//! File formats: GeoJSON annotations, JSON lines, images and provenance.

pub mod files;
pub mod geojson;

pub use files::*;
pub use geojson::{
    export_geojson, gt_features, load_annotations, parse_annotations, rasterize_rings, render_geojson,
    set_features, trace_polygons, AnnotationClass, AnnotationFeature, Annotations,
};
