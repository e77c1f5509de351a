//! ASCII PLY (format 1.0) export.

use std::io::{self, Write};

use super::PointCloud;

pub type Rgb = [u8; 3];

/// Writes `cloud` as ASCII PLY, optionally with one uchar RGB triple per point.
pub fn write_ply<W: Write>(out: &mut W, cloud: &PointCloud, colors: Option<&[Rgb]>) -> io::Result<()> {
    if let Some(c) = colors {
        if c.len() != cloud.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("{} colors for {} points", c.len(), cloud.len()),
            ));
        }
    }
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property double {axis}")?;
    }
    if colors.is_some() {
        for ch in ["red", "green", "blue"] {
            writeln!(out, "property uchar {ch}")?;
        }
    }
    writeln!(out, "end_header")?;
    for (i, p) in cloud.points().iter().enumerate() {
        match colors {
            Some(c) => writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], c[i][0], c[i][1], c[i][2])?,
            None => writeln!(out, "{} {} {}", p[0], p[1], p[2])?,
        }
    }
    Ok(())
}

const PALETTE: [Rgb; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Distinct color for a segment label; cycles after 12.
pub fn label_color(label: usize) -> Rgb {
    PALETTE[label % PALETTE.len()]
}
