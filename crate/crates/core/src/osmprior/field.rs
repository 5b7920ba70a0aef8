use super::{OsmData, WayKind};
use crate::geodesy::{EnuPoint, LocalFrame};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Write};

const DEDUP_RADIUS_M: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorParams {
    pub sigma_road: f64,
    pub sigma_building: f64,
    /// Resampling step along ways, meters.
    pub spacing: f64,
    /// Bucket size of the spatial index and heatmap resolution, meters.
    pub cell_size: f64,
    /// Kernels farther than this many sigmas are ignored.
    pub truncation: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            sigma_road: 2.0,
            sigma_building: 1.0,
            spacing: 5.0,
            cell_size: 0.25,
            truncation: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelClass {
    Road,
    BuildingEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelCenter {
    pub mu: EnuPoint,
    pub sigma: f64,
    pub class: KernelClass,
}

/// Points every `spacing` meters of arc length from the start of the
/// polyline, plus every vertex, with near-duplicates (< 1 cm) dropped.
pub fn interpolate_nodes(vertices: &[EnuPoint], spacing: f64) -> Vec<EnuPoint> {
    let mut out: Vec<EnuPoint> = Vec::new();
    let push = |p: EnuPoint, out: &mut Vec<EnuPoint>| {
        if !out.iter().any(|q| q.distance(&p) < DEDUP_RADIUS_M) {
            out.push(p);
        }
    };
    let Some(&first) = vertices.first() else {
        return out;
    };
    push(first, &mut out);
    let mut start = 0.0;
    let mut next = spacing;
    for w in vertices.windows(2) {
        let (p, q) = (w[0], w[1]);
        let len = p.distance(&q);
        if len > 0.0 && spacing > 0.0 {
            while next <= start + len {
                let t = (next - start) / len;
                push(EnuPoint::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)), &mut out);
                next += spacing;
            }
        }
        push(q, &mut out);
        start += len;
    }
    out
}

/// The penalty field W over a set of Gaussian kernels.
#[derive(Debug, Clone)]
pub struct PriorField {
    kernels: Vec<KernelCenter>,
    cell_size: f64,
    truncation: f64,
    max_sigma: f64,
    /// Kernel indices keyed by `(row, col)` cell.
    cells: BTreeMap<(i64, i64), Vec<usize>>,
}

impl PriorField {
    pub fn new(kernels: Vec<KernelCenter>, cell_size: f64, truncation: f64) -> Self {
        let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, k) in kernels.iter().enumerate() {
            cells.entry(cell_of(k.mu, cell_size)).or_default().push(i);
        }
        let max_sigma = kernels.iter().map(|k| k.sigma).fold(0.0, f64::max);
        Self {
            kernels,
            cell_size,
            truncation,
            max_sigma,
            cells,
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), PriorParams::default().cell_size, PriorParams::default().truncation)
    }

    pub fn kernels(&self) -> &[KernelCenter] {
        &self.kernels
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    /// Kernels whose truncation disc contains `x`.
    pub fn neighbors(&self, x: EnuPoint) -> Vec<&KernelCenter> {
        let mut found = Vec::new();
        if self.kernels.is_empty() {
            return found;
        }
        let r = self.truncation * self.max_sigma;
        let (r0, c0) = cell_of(EnuPoint::new(x.x - r, x.y - r), self.cell_size);
        let (r1, c1) = cell_of(EnuPoint::new(x.x + r, x.y + r), self.cell_size);
        for row in r0..=r1 {
            for (_, ids) in self.cells.range((row, c0)..=(row, c1)) {
                for &i in ids {
                    let k = &self.kernels[i];
                    let reach = self.truncation * k.sigma;
                    if x.distance_sq(&k.mu) <= reach * reach {
                        found.push(k);
                    }
                }
            }
        }
        found
    }

    /// `W(x) = 1 - min(1, sum exp(-|x - mu|^2 / (2 sigma^2)))` over nearby kernels.
    pub fn weight_at(&self, x: EnuPoint) -> f64 {
        let s: f64 = self
            .neighbors(x)
            .iter()
            .map(|k| (-x.distance_sq(&k.mu) / (2.0 * k.sigma * k.sigma)).exp())
            .sum();
        (1.0 - s.min(1.0)).clamp(0.0, 1.0)
    }
}

fn cell_of(p: EnuPoint, cell: f64) -> (i64, i64) {
    ((p.y / cell).floor() as i64, (p.x / cell).floor() as i64)
}

/// One kernel per resampled road point and per resampled building-edge point.
pub fn build_prior_field(osm: &OsmData, frame: &LocalFrame, params: &PriorParams) -> PriorField {
    let mut kernels = Vec::new();
    for way in osm.ways.values() {
        let (sigma, class) = match way.kind {
            WayKind::Road => (params.sigma_road, KernelClass::Road),
            WayKind::Building => (params.sigma_building, KernelClass::BuildingEdge),
        };
        let local: Vec<EnuPoint> = osm.geometry(way).into_iter().map(|g| frame.project(g)).collect();
        kernels.extend(
            interpolate_nodes(&local, params.spacing)
                .into_iter()
                .map(|mu| KernelCenter { mu, sigma, class }),
        );
    }
    PriorField::new(kernels, params.cell_size, params.truncation)
}

/// W sampled at cell centers, stored north row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub ncols: usize,
    pub nrows: usize,
    /// ENU coordinates of the lower-left corner, meters.
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn render(field: &PriorField, min: EnuPoint, max: EnuPoint, cellsize: f64) -> Self {
        let ncols = (((max.x - min.x) / cellsize).ceil().max(1.0)) as usize;
        let nrows = (((max.y - min.y) / cellsize).ceil().max(1.0)) as usize;
        let mut values = vec![0.0; ncols * nrows];
        values.par_chunks_mut(ncols).enumerate().for_each(|(row, out)| {
            let y = min.y + (nrows - row) as f64 * cellsize - cellsize / 2.0;
            for (col, v) in out.iter_mut().enumerate() {
                let x = min.x + col as f64 * cellsize + cellsize / 2.0;
                *v = field.weight_at(EnuPoint::new(x, y));
            }
        });
        Self {
            ncols,
            nrows,
            xll: min.x,
            yll: min.y,
            cellsize,
            values,
        }
    }

    /// Covers every kernel plus its truncation radius; `None` without kernels.
    pub fn around_kernels(field: &PriorField) -> Option<Self> {
        let ks = field.kernels();
        if ks.is_empty() {
            return None;
        }
        let pad = field.truncation * field.max_sigma;
        let fold = |f: fn(f64, f64) -> f64, init: f64, get: fn(&KernelCenter) -> f64| {
            ks.iter().map(get).fold(init, f)
        };
        let min = EnuPoint::new(
            fold(f64::min, f64::INFINITY, |k| k.mu.x) - pad,
            fold(f64::min, f64::INFINITY, |k| k.mu.y) - pad,
        );
        let max = EnuPoint::new(
            fold(f64::max, f64::NEG_INFINITY, |k| k.mu.x) + pad,
            fold(f64::max, f64::NEG_INFINITY, |k| k.mu.y) + pad,
        );
        Some(Self::render(field, min, max, field.cell_size))
    }

    /// ESRI ASCII grid.
    pub fn write_ascii<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "ncols {}", self.ncols)?;
        writeln!(w, "nrows {}", self.nrows)?;
        writeln!(w, "xllcorner {}", self.xll)?;
        writeln!(w, "yllcorner {}", self.yll)?;
        writeln!(w, "cellsize {}", self.cellsize)?;
        writeln!(w, "NODATA_value -9999")?;
        for row in self.values.chunks(self.ncols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_osm_xml;
    use super::*;
    use crate::geodesy::GeoPoint;
    use proptest::prelude::*;

    fn kernel(x: f64, y: f64, sigma: f64) -> KernelCenter {
        KernelCenter {
            mu: EnuPoint::new(x, y),
            sigma,
            class: KernelClass::Road,
        }
    }

    fn field(ks: Vec<KernelCenter>) -> PriorField {
        PriorField::new(ks, 0.25, 3.0)
    }

    #[test]
    fn twelve_meter_segment() {
        let pts = interpolate_nodes(&[EnuPoint::new(0.0, 0.0), EnuPoint::new(12.0, 0.0)], 5.0);
        let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 5.0, 10.0, 12.0]);
    }

    #[test]
    fn short_segment_keeps_endpoints() {
        let pts = interpolate_nodes(&[EnuPoint::new(0.0, 0.0), EnuPoint::new(0.0, 4.0)], 5.0);
        assert_eq!(pts, vec![EnuPoint::new(0.0, 0.0), EnuPoint::new(0.0, 4.0)]);
    }

    #[test]
    fn square_ring_of_20_m() {
        let ring = [
            EnuPoint::new(0.0, 0.0),
            EnuPoint::new(5.0, 0.0),
            EnuPoint::new(5.0, 5.0),
            EnuPoint::new(0.0, 5.0),
            EnuPoint::new(0.0, 0.0),
        ];
        assert_eq!(interpolate_nodes(&ring, 5.0), ring[..4].to_vec());
    }

    #[test]
    fn arc_length_carries_across_vertices() {
        // 3 m east then 4 m north: the 5 m mark sits 2 m up the second leg
        let pts = interpolate_nodes(
            &[EnuPoint::new(0.0, 0.0), EnuPoint::new(3.0, 0.0), EnuPoint::new(3.0, 4.0)],
            5.0,
        );
        assert_eq!(pts.len(), 4);
        assert!(pts[2].distance(&EnuPoint::new(3.0, 2.0)) < 1e-12);
    }

    #[test]
    fn weight_reference_values() {
        let f = field(vec![kernel(0.0, 0.0, 2.0)]);
        assert_eq!(f.weight_at(EnuPoint::new(0.0, 0.0)), 0.0);
        assert_eq!(f.weight_at(EnuPoint::new(6.01, 0.0)), 1.0);
        let expected = 1.0 - (-0.5f64).exp();
        assert!((f.weight_at(EnuPoint::new(0.0, 2.0)) - expected).abs() < 1e-12);
        assert!((expected - 0.393_469).abs() < 1e-6);
        assert_eq!(PriorField::empty().weight_at(EnuPoint::new(3.0, 3.0)), 1.0);
    }

    #[test]
    fn road_and_building_kernels_from_xml() {
        let origin = GeoPoint::new(53.34, -6.26).unwrap();
        let frame = LocalFrame::new(origin);
        let east = frame.from_enu(EnuPoint::new(12.0, 0.0));
        let doc = format!(
            r#"<osm><node id="1" lat="{}" lon="{}"/><node id="2" lat="{}" lon="{}"/>
            <way id="3"><nd ref="1"/><nd ref="2"/><tag k="highway" v="primary"/></way></osm>"#,
            origin.lat, origin.lon, east.lat, east.lon
        );
        let f = build_prior_field(&parse_osm_xml(&doc).unwrap(), &frame, &PriorParams::default());
        assert_eq!(f.kernels().len(), 4);
        assert!(f.kernels().iter().all(|k| k.sigma == 2.0 && k.class == KernelClass::Road));

        let corners: Vec<EnuPoint> =
            [(20.0, 20.0), (24.0, 20.0), (24.0, 24.0), (20.0, 24.0)].iter().map(|&(x, y)| EnuPoint::new(x, y)).collect();
        let mut doc = String::from("<osm>");
        for (i, c) in corners.iter().enumerate() {
            let g = frame.from_enu(*c);
            doc += &format!(r#"<node id="{}" lat="{}" lon="{}"/>"#, i + 1, g.lat, g.lon);
        }
        doc += r#"<way id="9"><nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="4"/><nd ref="1"/><tag k="building" v="yes"/></way></osm>"#;
        let f = build_prior_field(&parse_osm_xml(&doc).unwrap(), &frame, &PriorParams::default());
        assert!(!f.kernels().is_empty());
        assert!(f.kernels().iter().all(|k| k.sigma == 1.0 && k.class == KernelClass::BuildingEdge));
        // only the outline is penalized; the interior keeps a positive weight
        assert!(f.weight_at(EnuPoint::new(22.0, 22.0)) > 0.0);
    }

    #[test]
    fn ascii_grid_layout() {
        let f = field(vec![kernel(0.0, 0.0, 1.0)]);
        let h = Heatmap::around_kernels(&f).unwrap();
        assert_eq!((h.ncols, h.nrows), (24, 24));
        // the four cells around the kernel are the darkest
        let min = h.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(h.values[11 * 24 + 11], min);
        let mut buf = Vec::new();
        h.write_ascii(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "ncols 24");
        assert_eq!(lines[2], "xllcorner -3");
        assert_eq!(lines[5], "NODATA_value -9999");
        assert_eq!(lines.len(), 6 + 24);
        assert_eq!(lines[6].split(' ').count(), 24);
        assert!(Heatmap::around_kernels(&PriorField::empty()).is_none());
    }

    fn arb_kernels() -> impl Strategy<Value = Vec<KernelCenter>> {
        prop::collection::vec(
            (-10.0..10.0f64, -10.0..10.0f64, prop::bool::ANY)
                .prop_map(|(x, y, road)| kernel(x, y, if road { 2.0 } else { 1.0 })),
            0..25,
        )
    }

    proptest! {
        #[test]
        fn weight_is_a_unit_interval_value(ks in arb_kernels(), x in -20.0..20.0f64, y in -20.0..20.0f64) {
            let w = field(ks).weight_at(EnuPoint::new(x, y));
            prop_assert!((0.0..=1.0).contains(&w));
        }

        #[test]
        fn more_kernels_never_raise_weight(ks in arb_kernels(), extra in arb_kernels(), x in -15.0..15.0f64, y in -15.0..15.0f64) {
            let p = EnuPoint::new(x, y);
            let base = field(ks.clone()).weight_at(p);
            let mut all = ks;
            all.extend(extra);
            prop_assert!(field(all).weight_at(p) <= base);
        }

        #[test]
        fn weight_falls_toward_an_isolated_center(angle in 0.0..360.0f64, r1 in 0.0..8.0f64, dr in 0.0..8.0f64) {
            let f = field(vec![kernel(1.0, -2.0, 2.0)]);
            let (s, c) = angle.to_radians().sin_cos();
            let at = |r: f64| f.weight_at(EnuPoint::new(1.0 + r * s, -2.0 + r * c));
            prop_assert!(at(r1) <= at(r1 + dr));
        }

        #[test]
        fn truncation_error_is_bounded(ks in arb_kernels(), x in -15.0..15.0f64, y in -15.0..15.0f64) {
            let p = EnuPoint::new(x, y);
            let f = field(ks.clone());
            let full: f64 = ks.iter().map(|k| (-p.distance_sq(&k.mu) / (2.0 * k.sigma * k.sigma)).exp()).sum();
            let untruncated = 1.0 - full.min(1.0);
            let outside = ks.iter().filter(|k| p.distance(&k.mu) > 3.0 * k.sigma).count();
            prop_assert!((f.weight_at(p) - untruncated).abs() <= 0.012 * outside as f64 + 1e-12);
        }

        #[test]
        fn index_finds_every_kernel_in_reach(ks in arb_kernels(), x in -15.0..15.0f64, y in -15.0..15.0f64) {
            let p = EnuPoint::new(x, y);
            let f = field(ks.clone());
            let brute = ks.iter().filter(|k| p.distance(&k.mu) <= 3.0 * k.sigma).count();
            prop_assert_eq!(f.neighbors(p).len(), brute);
        }
    }
}
