//! File formats and visualization: Middlebury `.flo` flow files, the
//! standard flow color wheel, per-pixel error heatmaps, and PNG/PPM image
//! handling. Byte layouts are documented in `docs/formats.md`.

mod color;
mod flo;
mod img;

pub use color::{colormap_position, error_heatmap, flow_to_color, HeatmapMeta};
pub use flo::{read_flo, write_flo, FLO_MAGIC};
pub use img::{load_image, load_sequence, save_image, to_rgb8};
