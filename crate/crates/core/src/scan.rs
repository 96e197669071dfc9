//! Scan bundles and featured clouds: on-disk formats, feature lifting, and
//! view merging.
//!
//! A scan bundle is one camera view packaged as a directory:
//!
//! ```text
//! meta.json      width, height, feature_dims [Hf, Wf, C], intrinsics,
//!                4x4 row-major camera->world, depth encoding note,
//!                payload filenames, format_version
//! depth.bin      H*W float32 LE, row-major, meters
//! features.bin   Hf*Wf*C float32 LE, row-major, channel-last
//! rgb.ppm        optional P6 image
//! ```
//!
//! A featured cloud is a directory with `meta.json` (N, C, K) plus
//! `points.bin` (N*3 f32 LE), `feats.bin` (N*C f32 LE), and `view_ids.bin`
//! (N u16 LE). All round trips are bitwise exact on the binary payloads.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::geometry::{
    backproject_depth, CameraIntrinsics, DepthGrid, PixelIndex, PointCloud, RigidTransform,
};
use crate::{Error, Result};

pub const SCAN_BUNDLE_FORMAT: &str = "scan-bundle";
pub const FEATURED_CLOUD_FORMAT: &str = "featured-cloud";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Per-pixel feature grid, possibly at a different resolution than the
/// depth grid. Data is row-major, channel-last; entries mirror the on-disk
/// f32 payload exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: u32,
    width: u32,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: u32, width: u32, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidValue("feature map needs at least 1 channel".into()));
        }
        let expected = height as usize * width as usize * channels;
        if data.len() != expected {
            return Err(Error::Dimension {
                context: "feature map",
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite feature entry at flat index {i}"
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, uf: u32, vf: u32) -> &[f32] {
        let start = (vf as usize * self.width as usize + uf as usize) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// How per-pixel features are sampled when the feature grid resolution
/// differs from the depth grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSampling {
    /// Nearest feature cell by pixel center. Keeps provenance exact.
    #[default]
    Nearest,
    /// Bilinear blend of the four surrounding cells.
    Bilinear,
}

/// Options for lifting image features onto back-projected points.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiftConfig {
    pub sampling: FeatureSampling,
    /// L2-normalize each lifted feature vector.
    pub l2_normalize: bool,
}

/// Simple 8-bit RGB image, stored as binary PPM (P6) on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

/// One camera view: depth grid, calibration, camera->world pose, and a
/// per-pixel feature map.
#[derive(Debug, Clone)]
pub struct ScanBundle {
    pub depth: DepthGrid,
    pub intrinsics: CameraIntrinsics,
    pub camera_to_world: RigidTransform,
    pub features: FeatureMap,
    pub rgb: Option<RgbImage>,
}

#[derive(Serialize, Deserialize)]
struct ScanBundleMeta {
    format: String,
    format_version: u32,
    width: u32,
    height: u32,
    feature_dims: [usize; 3],
    intrinsics: CameraIntrinsics,
    camera_to_world: Vec<f64>,
    depth_encoding: String,
    depth_file: String,
    features_file: String,
    rgb_file: Option<String>,
}

impl ScanBundle {
    pub fn new(
        depth: DepthGrid,
        intrinsics: CameraIntrinsics,
        camera_to_world: RigidTransform,
        features: FeatureMap,
        rgb: Option<RgbImage>,
    ) -> Result<Self> {
        if depth.width() != intrinsics.width || depth.height() != intrinsics.height {
            return Err(Error::Dimension {
                context: "scan bundle depth vs intrinsics",
                expected: (intrinsics.width * intrinsics.height) as usize,
                actual: (depth.width() * depth.height()) as usize,
            });
        }
        Ok(Self { depth, intrinsics, camera_to_world, features, rgb })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = ScanBundleMeta {
            format: SCAN_BUNDLE_FORMAT.to_string(),
            format_version: FORMAT_VERSION,
            width: self.depth.width(),
            height: self.depth.height(),
            feature_dims: [
                self.features.height() as usize,
                self.features.width() as usize,
                self.features.channels(),
            ],
            intrinsics: self.intrinsics,
            camera_to_world: self.camera_to_world.to_matrix4_row_major().to_vec(),
            depth_encoding: "f32 LE meters, row-major; NaN or <= 0 marks invalid".to_string(),
            depth_file: "depth.bin".to_string(),
            features_file: "features.bin".to_string(),
            rgb_file: self.rgb.as_ref().map(|_| "rgb.ppm".to_string()),
        };
        binio::write_json(&dir.join("meta.json"), &meta)?;
        binio::write_f32_le(&dir.join("depth.bin"), self.depth.data())?;
        binio::write_f32_le(&dir.join("features.bin"), self.features.data())?;
        if let Some(rgb) = &self.rgb {
            write_ppm(&dir.join("rgb.ppm"), rgb)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: ScanBundleMeta = binio::read_json(&meta_path)?;
        if meta.format != SCAN_BUNDLE_FORMAT {
            return Err(format_err(
                &meta_path,
                format!("bad magic: expected {SCAN_BUNDLE_FORMAT:?}, got {:?}", meta.format),
            ));
        }
        if meta.format_version != FORMAT_VERSION {
            return Err(format_err(
                &meta_path,
                format!("unsupported format_version {}", meta.format_version),
            ));
        }
        let depth_len = meta.width as usize * meta.height as usize;
        let depth_data = binio::read_f32_le(&dir.join(&meta.depth_file), depth_len)?;
        let depth = DepthGrid::new(meta.width, meta.height, depth_data)?;
        let [hf, wf, c] = meta.feature_dims;
        let feat_data = binio::read_f32_le(&dir.join(&meta.features_file), hf * wf * c)?;
        let features = FeatureMap::new(hf as u32, wf as u32, c, feat_data)?;
        let m4: [f64; 16] = meta
            .camera_to_world
            .as_slice()
            .try_into()
            .map_err(|_| format_err(&meta_path, "camera_to_world must have 16 entries"))?;
        let camera_to_world = RigidTransform::from_matrix4_row_major(&m4)?;
        let rgb = match &meta.rgb_file {
            Some(name) => Some(read_ppm(&dir.join(name))?),
            None => None,
        };
        Self::new(depth, meta.intrinsics, camera_to_world, features, rgb)
    }
}

fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    fs::write(path, bytes)?;
    Ok(())
}

fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| format_err(path, "truncated PPM header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| format_err(path, "non-UTF8 PPM header"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("P6") {
        return Err(format_err(path, "bad magic: expected P6"));
    }
    let width: u32 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(path, "bad PPM width"))?;
    let height: u32 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(path, "bad PPM height"))?;
    let data = bytes[header_end + 1..].to_vec();
    let expected = width as usize * height as usize * 3;
    if data.len() != expected {
        return Err(format_err(
            path,
            format!("PPM payload is {} bytes, expected {expected}", data.len()),
        ));
    }
    Ok(RgbImage { width, height, data })
}

/// 3D points with per-point feature vectors and view provenance.
///
/// Features are held as f64 for downstream numerics; the on-disk payload is
/// f32. Pixel provenance is carried in memory when available but is not
/// persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedCloud {
    points: Vec<Vector3<f64>>,
    features: Vec<f64>,
    channels: usize,
    view_ids: Vec<u16>,
    view_count: u16,
    pixel_index: Option<Vec<PixelIndex>>,
}

#[derive(Serialize, Deserialize)]
struct FeaturedCloudMeta {
    format: String,
    format_version: u32,
    n_points: usize,
    channels: usize,
    view_count: u16,
    points_file: String,
    features_file: String,
    view_ids_file: String,
}

impl FeaturedCloud {
    pub fn new(
        points: Vec<Vector3<f64>>,
        features: Vec<f64>,
        channels: usize,
        view_ids: Vec<u16>,
        view_count: u16,
        pixel_index: Option<Vec<PixelIndex>>,
    ) -> Result<Self> {
        let n = points.len();
        if channels == 0 {
            return Err(Error::InvalidValue("featured cloud needs at least 1 channel".into()));
        }
        if features.len() != n * channels {
            return Err(Error::Dimension {
                context: "featured cloud features",
                expected: n * channels,
                actual: features.len(),
            });
        }
        if view_ids.len() != n {
            return Err(Error::Dimension {
                context: "featured cloud view ids",
                expected: n,
                actual: view_ids.len(),
            });
        }
        if let Some(px) = &pixel_index {
            if px.len() != n {
                return Err(Error::Dimension {
                    context: "featured cloud pixel index",
                    expected: n,
                    actual: px.len(),
                });
            }
        }
        if view_ids.iter().any(|&v| v >= view_count.max(1)) {
            return Err(Error::InvalidValue("view id out of range".into()));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite feature at flat index {i}")));
        }
        Ok(Self {
            points,
            features,
            channels,
            view_ids,
            view_count: view_count.max(1),
            pixel_index,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn view_count(&self) -> u16 {
        self.view_count
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn view_ids(&self) -> &[u16] {
        &self.view_ids
    }

    pub fn pixel_index(&self) -> Option<&[PixelIndex]> {
        self.pixel_index.as_deref()
    }

    pub fn cloud(&self) -> PointCloud {
        PointCloud::new(self.points.clone()).expect("points validated on construction")
    }

    /// Replace the feature matrix, keeping points and provenance.
    pub fn with_features(&self, features: Vec<f64>, channels: usize) -> Result<Self> {
        Self::new(
            self.points.clone(),
            features,
            channels,
            self.view_ids.clone(),
            self.view_count,
            self.pixel_index.clone(),
        )
    }

    /// Keep only the rows flagged in `keep`, preserving order.
    pub fn retain_rows(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return Err(Error::Dimension {
                context: "retain mask",
                expected: self.len(),
                actual: keep.len(),
            });
        }
        let mut points = Vec::new();
        let mut features = Vec::new();
        let mut view_ids = Vec::new();
        let mut pixel_index = self.pixel_index.as_ref().map(|_| Vec::new());
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                continue;
            }
            points.push(self.points[i]);
            features.extend_from_slice(self.feature(i));
            view_ids.push(self.view_ids[i]);
            if let (Some(out), Some(px)) = (&mut pixel_index, &self.pixel_index) {
                out.push(px[i]);
            }
        }
        Self::new(points, features, self.channels, view_ids, self.view_count, pixel_index)
    }

    /// Slice of point ids belonging to one view.
    pub fn view_rows(&self, view: u16) -> Vec<usize> {
        self.view_ids
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == view)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = FeaturedCloudMeta {
            format: FEATURED_CLOUD_FORMAT.to_string(),
            format_version: FORMAT_VERSION,
            n_points: self.len(),
            channels: self.channels,
            view_count: self.view_count,
            points_file: "points.bin".to_string(),
            features_file: "feats.bin".to_string(),
            view_ids_file: "view_ids.bin".to_string(),
        };
        binio::write_json(&dir.join("meta.json"), &meta)?;
        let mut pts = Vec::with_capacity(self.len() * 3);
        for p in &self.points {
            pts.extend_from_slice(&[p.x as f32, p.y as f32, p.z as f32]);
        }
        binio::write_f32_le(&dir.join("points.bin"), &pts)?;
        let feats: Vec<f32> = self.features.iter().map(|&v| v as f32).collect();
        binio::write_f32_le(&dir.join("feats.bin"), &feats)?;
        binio::write_u16_le(&dir.join("view_ids.bin"), &self.view_ids)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: FeaturedCloudMeta = binio::read_json(&meta_path)?;
        if meta.format != FEATURED_CLOUD_FORMAT {
            return Err(format_err(
                &meta_path,
                format!("bad magic: expected {FEATURED_CLOUD_FORMAT:?}, got {:?}", meta.format),
            ));
        }
        if meta.format_version != FORMAT_VERSION {
            return Err(format_err(
                &meta_path,
                format!("unsupported format_version {}", meta.format_version),
            ));
        }
        let pts = binio::read_f32_le(&dir.join(&meta.points_file), meta.n_points * 3)?;
        let feats = binio::read_f32_le(&dir.join(&meta.features_file), meta.n_points * meta.channels)?;
        let view_ids = binio::read_u16_le(&dir.join(&meta.view_ids_file), meta.n_points)?;
        let points = pts
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        let features = feats.iter().map(|&v| v as f64).collect();
        Self::new(points, features, meta.channels, view_ids, meta.view_count, None)
    }
}

/// Back-project a bundle's depth and attach per-point features sampled from
/// its feature map. Produces one feature row per valid depth pixel; the
/// output is a single view with view id 0.
pub fn lift_features(bundle: &ScanBundle, cfg: &LiftConfig) -> Result<FeaturedCloud> {
    let (cloud, pixels) =
        backproject_depth(&bundle.depth, &bundle.intrinsics, &bundle.camera_to_world)?;
    let fmap = &bundle.features;
    let c = fmap.channels();
    let w = bundle.depth.width() as f64;
    let h = bundle.depth.height() as f64;
    let wf = fmap.width();
    let hf = fmap.height();
    let mut features = Vec::with_capacity(cloud.len() * c);
    for &(u, v) in &pixels {
        match cfg.sampling {
            FeatureSampling::Nearest => {
                let uf = scale_nearest(u, wf, w);
                let vf = scale_nearest(v, hf, h);
                features.extend(fmap.cell(uf, vf).iter().map(|&x| x as f64));
            }
            FeatureSampling::Bilinear => {
                sample_bilinear(fmap, u, v, w, h, &mut features);
            }
        }
        if cfg.l2_normalize {
            let start = features.len() - c;
            let norm = features[start..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in &mut features[start..] {
                    *x /= norm;
                }
            }
        }
    }
    FeaturedCloud::new(cloud.points().to_vec(), features, c, vec![0; pixels.len()], 1, Some(pixels))
}

/// Map a depth pixel center onto the feature grid and take the containing
/// cell. With an integer scale factor s this reduces to `floor(u / s)`.
fn scale_nearest(u: u32, wf: u32, w: f64) -> u32 {
    let x = (u as f64 + 0.5) * wf as f64 / w;
    (x.floor() as i64).clamp(0, wf as i64 - 1) as u32
}

fn sample_bilinear(fmap: &FeatureMap, u: u32, v: u32, w: f64, h: f64, out: &mut Vec<f64>) {
    let x = ((u as f64 + 0.5) * fmap.width() as f64 / w - 0.5)
        .clamp(0.0, fmap.width() as f64 - 1.0);
    let y = ((v as f64 + 0.5) * fmap.height() as f64 / h - 0.5)
        .clamp(0.0, fmap.height() as f64 - 1.0);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(fmap.width() - 1);
    let y1 = (y0 + 1).min(fmap.height() - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let c00 = fmap.cell(x0, y0);
    let c10 = fmap.cell(x1, y0);
    let c01 = fmap.cell(x0, y1);
    let c11 = fmap.cell(x1, y1);
    for ch in 0..fmap.channels() {
        let top = c00[ch] as f64 * (1.0 - tx) + c10[ch] as f64 * tx;
        let bot = c01[ch] as f64 * (1.0 - tx) + c11[ch] as f64 * tx;
        out.push(top * (1.0 - ty) + bot * ty);
    }
}

/// Concatenate per-view clouds into one scene cloud. View k of the input
/// occupies a contiguous block in input order and its points get view id k.
pub fn merge_views(clouds: &[FeaturedCloud]) -> Result<FeaturedCloud> {
    let first = clouds.first().ok_or(Error::EmptyCloud)?;
    let channels = first.channels();
    if clouds.len() > u16::MAX as usize {
        return Err(Error::InvalidValue("too many views".into()));
    }
    let mut points = Vec::new();
    let mut features = Vec::new();
    let mut view_ids = Vec::new();
    let mut pixel_index = clouds.iter().all(|c| c.pixel_index().is_some()).then(Vec::new);
    for (k, cloud) in clouds.iter().enumerate() {
        if cloud.channels() != channels {
            return Err(Error::Dimension {
                context: "merge channel count",
                expected: channels,
                actual: cloud.channels(),
            });
        }
        points.extend_from_slice(cloud.points());
        features.extend_from_slice(cloud.features());
        view_ids.extend(std::iter::repeat(k as u16).take(cloud.len()));
        if let (Some(out), Some(px)) = (&mut pixel_index, cloud.pixel_index()) {
            out.extend_from_slice(px);
        }
    }
    FeaturedCloud::new(points, features, channels, view_ids, clouds.len() as u16, pixel_index)
}

/// Rigidly transform a featured cloud; features ride along unchanged.
pub fn transform_featured_cloud(cloud: &FeaturedCloud, t: &RigidTransform) -> FeaturedCloud {
    FeaturedCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        features: cloud.features.clone(),
        channels: cloud.channels,
        view_ids: cloud.view_ids.clone(),
        view_count: cloud.view_count,
        pixel_index: cloud.pixel_index.clone(),
    }
}

/// Project features onto their top principal components.
///
/// Centers the feature matrix, takes the `target_channels` eigenvectors of
/// the covariance with the largest eigenvalues, and replaces each feature by
/// its coordinates in that basis. A speed/size trade-off; exact features
/// remain the reference.
pub fn compress_features_pca(cloud: &FeaturedCloud, target_channels: usize) -> Result<FeaturedCloud> {
    let c = cloud.channels();
    let n = cloud.len();
    if target_channels == 0 || target_channels > c {
        return Err(Error::InvalidValue(format!(
            "PCA target channels must be in 1..={c}, got {target_channels}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidValue("PCA needs at least 2 points".into()));
    }
    let mut mean = vec![0.0f64; c];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(cloud.feature(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for i in 0..n {
        let f = cloud.feature(i);
        for a in 0..c {
            let da = f[a] - mean[a];
            for b in a..c {
                cov[(a, b)] += da * (f[b] - mean[b]);
            }
        }
    }
    for a in 0..c {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    cov /= (n - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then_with(|| a.cmp(&b))
    });
    let mut features = Vec::with_capacity(n * target_channels);
    for i in 0..n {
        let f = cloud.feature(i);
        for &k in order.iter().take(target_channels) {
            let col = eig.eigenvectors.column(k);
            let mut dot = 0.0;
            for a in 0..c {
                dot += (f[a] - mean[a]) * col[a];
            }
            features.push(dot);
        }
    }
    cloud.with_features(features, target_channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_bundle(hf: u32, wf: u32, c: usize) -> ScanBundle {
        let intr = CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
        let depth = DepthGrid::new(4, 4, vec![1.0; 16]).unwrap();
        let data: Vec<f32> = (0..(hf * wf) as usize * c).map(|i| i as f32).collect();
        let features = FeatureMap::new(hf, wf, c, data).unwrap();
        ScanBundle::new(depth, intr, RigidTransform::identity(), features, None).unwrap()
    }

    #[test]
    fn bundle_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let mut bundle = tiny_bundle(4, 4, 2);
        bundle.rgb = Some(RgbImage {
            width: 4,
            height: 4,
            data: (0..48).collect(),
        });
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        bundle.save(&a).unwrap();
        let loaded = ScanBundle::load(&a).unwrap();
        loaded.save(&b).unwrap();
        for name in ["meta.json", "depth.bin", "features.bin", "rgb.ppm"] {
            assert_eq!(
                fs::read(a.join(name)).unwrap(),
                fs::read(b.join(name)).unwrap(),
                "{name} differs"
            );
        }
    }

    #[test]
    fn truncated_features_blob_errors() {
        let dir = tempdir().unwrap();
        let bundle = tiny_bundle(4, 4, 2);
        let path = dir.path().join("bundle");
        bundle.save(&path).unwrap();
        let blob = fs::read(path.join("features.bin")).unwrap();
        fs::write(path.join("features.bin"), &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(ScanBundle::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_errors() {
        let dir = tempdir().unwrap();
        let bundle = tiny_bundle(4, 4, 1);
        let path = dir.path().join("bundle");
        bundle.save(&path).unwrap();
        let meta = fs::read_to_string(path.join("meta.json")).unwrap();
        fs::write(
            path.join("meta.json"),
            meta.replace("scan-bundle", "not-a-bundle"),
        )
        .unwrap();
        assert!(matches!(ScanBundle::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn depth_fixture_has_exact_little_endian_layout() {
        // 2x2 depth with values 0.5, 1.0, invalid, 2.0; authored bytes below.
        let dir = tempdir().unwrap();
        let intr = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0, 2, 2).unwrap();
        let depth = DepthGrid::new(2, 2, vec![0.5, 1.0, -1.0, 2.0]).unwrap();
        let features = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bundle =
            ScanBundle::new(depth, intr, RigidTransform::identity(), features, None).unwrap();
        let path = dir.path().join("bundle");
        bundle.save(&path).unwrap();
        let bytes = fs::read(path.join("depth.bin")).unwrap();
        let expected: Vec<u8> = [0.5f32, 1.0, -1.0, 2.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn lift_constant_feature_map() {
        let intr = CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
        let depth = DepthGrid::new(4, 4, vec![1.0; 16]).unwrap();
        let features = FeatureMap::new(2, 2, 3, vec![7.0; 12]).unwrap();
        let bundle =
            ScanBundle::new(depth, intr, RigidTransform::identity(), features, None).unwrap();
        let lifted = lift_features(&bundle, &LiftConfig::default()).unwrap();
        assert_eq!(lifted.len(), 16);
        assert!(lifted.features().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn lift_full_resolution_matches_pixels() {
        let bundle = tiny_bundle(4, 4, 2);
        let lifted = lift_features(&bundle, &LiftConfig::default()).unwrap();
        let px = lifted.pixel_index().unwrap();
        for i in 0..lifted.len() {
            let (u, v) = px[i];
            let cell = bundle.features.cell(u, v);
            assert_eq!(lifted.feature(i)[0], cell[0] as f64);
            assert_eq!(lifted.feature(i)[1], cell[1] as f64);
        }
    }

    #[test]
    fn lift_half_resolution_uses_floored_cells() {
        let bundle = tiny_bundle(2, 2, 1);
        let lifted = lift_features(&bundle, &LiftConfig::default()).unwrap();
        let px = lifted.pixel_index().unwrap();
        for i in 0..lifted.len() {
            let (u, v) = px[i];
            let expected = bundle.features.cell(u / 2, v / 2)[0] as f64;
            assert_eq!(lifted.feature(i)[0], expected, "pixel ({u},{v})");
        }
    }

    #[test]
    fn lift_count_equals_valid_pixels() {
        let intr = CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
        let mut d = vec![1.0f32; 16];
        d[3] = f32::NAN;
        d[7] = 0.0;
        d[11] = -2.0;
        let depth = DepthGrid::new(4, 4, d).unwrap();
        let features = FeatureMap::new(4, 4, 1, vec![0.0; 16]).unwrap();
        let bundle =
            ScanBundle::new(depth, intr, RigidTransform::identity(), features, None).unwrap();
        let lifted = lift_features(&bundle, &LiftConfig::default()).unwrap();
        assert_eq!(lifted.len(), 13);
    }

    #[test]
    fn merge_single_view_is_identity() {
        let bundle = tiny_bundle(4, 4, 2);
        let lifted = lift_features(&bundle, &LiftConfig::default()).unwrap();
        let merged = merge_views(std::slice::from_ref(&lifted)).unwrap();
        assert_eq!(merged.points(), lifted.points());
        assert_eq!(merged.features(), lifted.features());
        assert_eq!(merged.view_ids(), lifted.view_ids());
    }

    #[test]
    fn merge_assigns_contiguous_view_blocks() {
        let a = FeaturedCloud::new(
            vec![Vector3::zeros(); 10],
            vec![1.0; 20],
            2,
            vec![0; 10],
            1,
            None,
        )
        .unwrap();
        let b = FeaturedCloud::new(
            vec![Vector3::x(); 20],
            vec![2.0; 40],
            2,
            vec![0; 20],
            1,
            None,
        )
        .unwrap();
        let merged = merge_views(&[a, b]).unwrap();
        assert_eq!(merged.len(), 30);
        assert_eq!(merged.view_count(), 2);
        assert!(merged.view_ids()[..10].iter().all(|&v| v == 0));
        assert!(merged.view_ids()[10..].iter().all(|&v| v == 1));
        assert_eq!(merged.view_rows(1).len(), 20);
    }

    #[test]
    fn merge_rejects_channel_mismatch() {
        let a = FeaturedCloud::new(vec![Vector3::zeros()], vec![1.0], 1, vec![0], 1, None).unwrap();
        let b =
            FeaturedCloud::new(vec![Vector3::zeros()], vec![1.0, 2.0], 2, vec![0], 1, None).unwrap();
        assert!(matches!(merge_views(&[a, b]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn featured_cloud_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let cloud = FeaturedCloud::new(
            vec![Vector3::new(0.125, -0.5, 2.0), Vector3::new(1.0, 2.0, 3.0)],
            vec![0.25, 1.5, -3.75, 8.0],
            2,
            vec![0, 1],
            2,
            None,
        )
        .unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        cloud.save(&a).unwrap();
        let loaded = FeaturedCloud::load(&a).unwrap();
        loaded.save(&b).unwrap();
        for name in ["meta.json", "points.bin", "feats.bin", "view_ids.bin"] {
            assert_eq!(
                fs::read(a.join(name)).unwrap(),
                fs::read(b.join(name)).unwrap(),
                "{name} differs"
            );
        }
    }

    #[test]
    fn pca_to_full_rank_preserves_pairwise_distances() {
        let cloud = FeaturedCloud::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()],
            vec![
                1.0, 0.0, 0.5, //
                0.0, 1.0, -0.5, //
                1.0, 1.0, 0.0, //
                -1.0, 0.5, 0.25,
            ],
            3,
            vec![0; 4],
            1,
            None,
        )
        .unwrap();
        let compressed = compress_features_pca(&cloud, 3).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d0: f64 = cloud
                    .feature(i)
                    .iter()
                    .zip(cloud.feature(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let d1: f64 = compressed
                    .feature(i)
                    .iter()
                    .zip(compressed.feature(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((d0 - d1).abs() < 1e-9, "{d0} vs {d1}");
            }
        }
    }
}
