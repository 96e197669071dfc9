//! Generic articulated end-effector: kinematic tree, joint limits, weighted
//! surface sampling, collision spheres, and the physical energy terms.
//!
//! The effector is described by a data file (JSON), not code, so any hand
//! or gripper geometry is loadable. The root link moves freely (6 DoF); the
//! parameter vector β is `[root rotation vector, root translation, joint
//! values]` with dimension `6 + joint count`.

mod jacobian;

pub use jacobian::JacobianContext;

use std::collections::HashSet;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::geometry::{PointCloud, RigidTransform, SpatialIndex};
use crate::{Error, Result};

pub const EFFECTOR_FORMAT: &str = "effector-spec";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One articulated degree of freedom, applied after the link origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Joint {
    #[serde(rename = "type")]
    pub kind: JointKind,
    /// Motion axis in the joint frame; normalized on load.
    pub axis: [f64; 3],
    /// [lo, hi] in radians or meters.
    pub limits: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollisionSphere {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    /// Parent link name; exactly one link (the root) has none. Parents must
    /// be declared before children.
    #[serde(default)]
    pub parent: Option<String>,
    /// Fixed transform from the parent frame (identity if absent).
    #[serde(default)]
    pub origin: Option<RigidTransform>,
    #[serde(default)]
    pub joint: Option<Joint>,
    /// Candidate query-point sites in the link frame.
    #[serde(default)]
    pub surface_sites: Vec<[f64; 3]>,
    /// Relative share of query samples this link receives.
    #[serde(default)]
    pub site_weight: f64,
    #[serde(default)]
    pub collision_spheres: Vec<CollisionSphere>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EffectorFile {
    format: String,
    format_version: u32,
    links: Vec<LinkSpec>,
    /// Extra link pairs (by name) excluded from self-penetration checks;
    /// parent/child pairs are always excluded.
    #[serde(default)]
    self_collision_exclusions: Vec<[String; 2]>,
}

/// Validated articulated end-effector description.
#[derive(Debug, Clone)]
pub struct EffectorSpec {
    links: Vec<LinkSpec>,
    parents: Vec<Option<usize>>,
    origins: Vec<RigidTransform>,
    axes: Vec<Vector3<f64>>,
    /// Link index of each joint, in β order.
    joint_links: Vec<usize>,
    /// Joint index per link, if articulated.
    link_joint: Vec<Options>,
    /// Joint ids on the path from root to each link.
    ancestor_joints: Vec<Vec<u16>>,
    /// Flattened (link, local center, radius) collision spheres.
    spheres: Vec<(usize, Vector3<f64>, f64)>,
    /// Unordered sphere pairs participating in self-penetration checks.
    spen_pairs: Vec<(usize, usize)>,
}

type Options = Option<usize>;

impl EffectorSpec {
    pub fn from_links(
        links: Vec<LinkSpec>,
        exclusions: &[[String; 2]],
    ) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::InvalidValue("effector needs at least one link".into()));
        }
        let mut parents = Vec::with_capacity(links.len());
        let mut roots = 0usize;
        for (i, link) in links.iter().enumerate() {
            match &link.parent {
                None => {
                    roots += 1;
                    if link.joint.is_some() {
                        return Err(Error::InvalidValue(format!(
                            "root link {:?} cannot carry a joint; its pose is the free root",
                            link.name
                        )));
                    }
                    parents.push(None);
                }
                Some(name) => {
                    let idx = links[..i]
                        .iter()
                        .position(|l| &l.name == name)
                        .ok_or_else(|| {
                            Error::InvalidValue(format!(
                                "link {:?}: parent {name:?} not declared earlier (links must be in tree order)",
                                link.name
                            ))
                        })?;
                    parents.push(Some(idx));
                }
            }
        }
        if roots != 1 {
            return Err(Error::InvalidValue(format!(
                "effector must have exactly one root link, found {roots}"
            )));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidValue("the first link must be the root".into()));
        }

        let mut origins = Vec::with_capacity(links.len());
        let mut axes = Vec::with_capacity(links.len());
        let mut joint_links = Vec::new();
        let mut link_joint = Vec::with_capacity(links.len());
        for (i, link) in links.iter().enumerate() {
            origins.push(link.origin.unwrap_or_else(RigidTransform::identity));
            match &link.joint {
                Some(j) => {
                    let axis = Vector3::new(j.axis[0], j.axis[1], j.axis[2]);
                    let norm = axis.norm();
                    if norm < 1e-12 {
                        return Err(Error::InvalidValue(format!(
                            "link {:?}: joint axis is zero",
                            link.name
                        )));
                    }
                    if j.limits[0] > j.limits[1] {
                        return Err(Error::InvalidValue(format!(
                            "link {:?}: joint limits [{}, {}] are inverted",
                            link.name, j.limits[0], j.limits[1]
                        )));
                    }
                    axes.push(axis / norm);
                    link_joint.push(Some(joint_links.len()));
                    joint_links.push(i);
                }
                None => {
                    axes.push(Vector3::zeros());
                    link_joint.push(None);
                }
            }
            for s in &link.collision_spheres {
                if !(s.radius > 0.0) {
                    return Err(Error::InvalidValue(format!(
                        "link {:?}: sphere radius must be positive",
                        link.name
                    )));
                }
            }
            if link.site_weight < 0.0 {
                return Err(Error::InvalidValue(format!(
                    "link {:?}: site weight must be >= 0",
                    link.name
                )));
            }
            if link.site_weight > 0.0 && link.surface_sites.is_empty() {
                return Err(Error::InvalidValue(format!(
                    "link {:?}: positive site weight but no surface sites",
                    link.name
                )));
            }
        }
        if !links.iter().any(|l| l.site_weight > 0.0) {
            return Err(Error::InvalidValue(
                "at least one link needs a positive site weight".into(),
            ));
        }

        let mut ancestor_joints: Vec<Vec<u16>> = Vec::with_capacity(links.len());
        for i in 0..links.len() {
            let mut chain = match parents[i] {
                Some(p) => ancestor_joints[p].clone(),
                None => Vec::new(),
            };
            if let Some(j) = link_joint[i] {
                chain.push(j as u16);
            }
            ancestor_joints.push(chain);
        }

        let name_index = |name: &str| -> Result<usize> {
            links
                .iter()
                .position(|l| l.name == name)
                .ok_or_else(|| Error::InvalidValue(format!("unknown link {name:?} in exclusions")))
        };
        let mut excluded: HashSet<(usize, usize)> = HashSet::new();
        for pair in exclusions {
            let a = name_index(&pair[0])?;
            let b = name_index(&pair[1])?;
            excluded.insert((a.min(b), a.max(b)));
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                excluded.insert(((*p).min(i), (*p).max(i)));
            }
        }

        let mut spheres = Vec::new();
        for (i, link) in links.iter().enumerate() {
            for s in &link.collision_spheres {
                spheres.push((i, Vector3::new(s.center[0], s.center[1], s.center[2]), s.radius));
            }
        }
        let mut spen_pairs = Vec::new();
        for a in 0..spheres.len() {
            for b in (a + 1)..spheres.len() {
                let (la, lb) = (spheres[a].0, spheres[b].0);
                if la == lb {
                    continue;
                }
                if excluded.contains(&(la.min(lb), la.max(lb))) {
                    continue;
                }
                spen_pairs.push((a, b));
            }
        }

        Ok(Self {
            links,
            parents,
            origins,
            axes,
            joint_links,
            link_joint,
            ancestor_joints,
            spheres,
            spen_pairs,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: EffectorFile = binio::read_json(path)?;
        if file.format != EFFECTOR_FORMAT {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("bad magic: expected {EFFECTOR_FORMAT:?}, got {:?}", file.format),
            });
        }
        Self::from_links(file.links, &file.self_collision_exclusions)
    }

    pub fn save(&self, path: &Path, exclusions: &[[String; 2]]) -> Result<()> {
        let file = EffectorFile {
            format: EFFECTOR_FORMAT.to_string(),
            format_version: crate::scan::FORMAT_VERSION,
            links: self.links.clone(),
            self_collision_exclusions: exclusions.to_vec(),
        };
        binio::write_json(path, &file)
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_links.len()
    }

    /// β dimension: 6 root DoF plus one per joint.
    pub fn state_dim(&self) -> usize {
        6 + self.joint_count()
    }

    pub fn joint_limits(&self) -> Vec<[f64; 2]> {
        self.joint_links
            .iter()
            .map(|&l| self.links[l].joint.as_ref().expect("joint link").limits)
            .collect()
    }

    pub(crate) fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub(crate) fn ancestor_joints(&self, link: usize) -> &[u16] {
        &self.ancestor_joints[link]
    }

    pub fn spheres(&self) -> &[(usize, Vector3<f64>, f64)] {
        &self.spheres
    }

    pub fn spen_pairs(&self) -> &[(usize, usize)] {
        &self.spen_pairs
    }
}

/// Effector parameters: free root pose plus joint values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectorState {
    pub root: RigidTransform,
    pub joints: Vec<f64>,
}

impl EffectorState {
    pub fn zero(spec: &EffectorSpec) -> Self {
        Self {
            root: RigidTransform::identity(),
            joints: vec![0.0; spec.joint_count()],
        }
    }

    pub fn validate(&self, spec: &EffectorSpec) -> Result<()> {
        if self.joints.len() != spec.joint_count() {
            return Err(Error::Dimension {
                context: "effector state joints",
                expected: spec.joint_count(),
                actual: self.joints.len(),
            });
        }
        if !self.joints.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("non-finite joint value".into()));
        }
        Ok(())
    }

    /// Flatten to `[root rotation vector, root translation, joints]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*self.root.rotation());
        let rv = rot.scaled_axis();
        let t = self.root.translation();
        let mut out = vec![rv.x, rv.y, rv.z, t.x, t.y, t.z];
        out.extend_from_slice(&self.joints);
        out
    }

    pub fn from_vector(spec: &EffectorSpec, v: &[f64]) -> Result<Self> {
        if v.len() != spec.state_dim() {
            return Err(Error::Dimension {
                context: "effector state vector",
                expected: spec.state_dim(),
                actual: v.len(),
            });
        }
        let rv = Vector3::new(v[0], v[1], v[2]);
        let rot = nalgebra::Rotation3::from_scaled_axis(rv);
        let root = RigidTransform::try_new(rot.into_inner(), Vector3::new(v[3], v[4], v[5]))?;
        Ok(Self {
            root,
            joints: v[6..].to_vec(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        binio::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_json(path, self)
    }
}

/// World transform of every link under a state.
pub fn forward_kinematics(spec: &EffectorSpec, state: &EffectorState) -> Result<Vec<RigidTransform>> {
    state.validate(spec)?;
    let mut out: Vec<RigidTransform> = Vec::with_capacity(spec.link_count());
    for i in 0..spec.link_count() {
        let base = match spec.parents[i] {
            None => state.root.compose(&spec.origins[i]),
            Some(p) => out[p].compose(&spec.origins[i]),
        };
        let with_joint = match spec.link_joint[i] {
            Some(j) => {
                let value = state.joints[j];
                let motion = match spec.links[i].joint.as_ref().expect("joint link").kind {
                    JointKind::Revolute => {
                        RigidTransform::from_axis_angle(&spec.axes[i], value, Vector3::zeros())
                    }
                    JointKind::Prismatic => {
                        RigidTransform::from_translation(spec.axes[i] * value)
                    }
                };
                base.compose(&motion)
            }
            None => base,
        };
        out.push(with_joint);
    }
    Ok(out)
}

/// Per-sample link ids and link-frame positions, fixed for one optimization
/// run so query sets under different states correspond pointwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSelection {
    pub link_ids: Vec<usize>,
    pub local: Vec<Vector3<f64>>,
}

/// World-space query points with link provenance.
#[derive(Debug, Clone)]
pub struct SurfaceSamples {
    pub points: Vec<Vector3<f64>>,
    pub link_ids: Vec<usize>,
}

/// Allocate `q` samples across links proportionally to their site weights
/// (largest-remainder rounding) and pick sites uniformly per link.
pub fn select_sites(spec: &EffectorSpec, q: usize, seed: u64) -> Result<SiteSelection> {
    if q == 0 {
        return Err(Error::InvalidValue("need at least one query sample".into()));
    }
    let total: f64 = spec.links.iter().map(|l| l.site_weight).sum();
    let mut counts = vec![0usize; spec.link_count()];
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    let mut allocated = 0usize;
    for (i, link) in spec.links.iter().enumerate() {
        let share = q as f64 * link.site_weight / total;
        counts[i] = share.floor() as usize;
        allocated += counts[i];
        remainders.push((share - share.floor(), i));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(q - allocated) {
        counts[i] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut link_ids = Vec::with_capacity(q);
    let mut local = Vec::with_capacity(q);
    for (i, link) in spec.links.iter().enumerate() {
        for _ in 0..counts[i] {
            let site = link.surface_sites[rng.gen_range(0..link.surface_sites.len())];
            link_ids.push(i);
            local.push(Vector3::new(site[0], site[1], site[2]));
        }
    }
    Ok(SiteSelection { link_ids, local })
}

/// Realize a site selection as world points under a state.
pub fn site_positions(
    spec: &EffectorSpec,
    state: &EffectorState,
    selection: &SiteSelection,
) -> Result<Vec<Vector3<f64>>> {
    let fk = forward_kinematics(spec, state)?;
    Ok(selection
        .link_ids
        .iter()
        .zip(&selection.local)
        .map(|(&l, p)| fk[l].apply(p))
        .collect())
}

/// Seeded surface sampling under one state.
pub fn sample_query_points(
    spec: &EffectorSpec,
    state: &EffectorState,
    q: usize,
    seed: u64,
) -> Result<SurfaceSamples> {
    let selection = select_sites(spec, q, seed)?;
    let points = site_positions(spec, state, &selection)?;
    Ok(SurfaceSamples {
        points,
        link_ids: selection.link_ids,
    })
}

/// Scene points strictly inside any collision sphere contribute their depth
/// `min over containing spheres of (radius - distance to center)`.
pub fn energy_pen(spec: &EffectorSpec, state: &EffectorState, scene: &PointCloud) -> Result<f64> {
    let fk = forward_kinematics(spec, state)?;
    let index = SpatialIndex::build(scene);
    Ok(energy_pen_with_fk(spec, &fk, &index))
}

pub fn energy_pen_with_fk(spec: &EffectorSpec, fk: &[RigidTransform], scene: &SpatialIndex) -> f64 {
    let mut depth: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for &(link, ref center, radius) in spec.spheres() {
        let c = fk[link].apply(center);
        for id in scene.radius_neighbors(&c, radius) {
            let d = radius - (scene.point(id) - c).norm();
            depth
                .entry(id)
                .and_modify(|cur| *cur = cur.min(d))
                .or_insert(d);
        }
    }
    depth.values().sum()
}

/// Self-penetration: over unordered sphere-center pairs on non-adjacent
/// links, `max(margin - distance, 0)` summed.
pub fn energy_spen(spec: &EffectorSpec, state: &EffectorState, margin: f64) -> Result<f64> {
    let fk = forward_kinematics(spec, state)?;
    Ok(energy_spen_with_fk(spec, &fk, margin))
}

pub fn energy_spen_with_fk(spec: &EffectorSpec, fk: &[RigidTransform], margin: f64) -> f64 {
    let centers: Vec<Vector3<f64>> = spec
        .spheres()
        .iter()
        .map(|&(link, ref c, _)| fk[link].apply(c))
        .collect();
    let mut total = 0.0;
    for &(a, b) in spec.spen_pairs() {
        let d = (centers[a] - centers[b]).norm();
        if d < margin {
            total += margin - d;
        }
    }
    total
}

/// Quadratic hinge on joint-limit violations.
pub fn energy_pose(spec: &EffectorSpec, state: &EffectorState) -> Result<f64> {
    state.validate(spec)?;
    let limits = spec.joint_limits();
    Ok(state
        .joints
        .iter()
        .zip(&limits)
        .map(|(&v, lim)| {
            let excess = (lim[0] - v).max(0.0) + (v - lim[1]).max(0.0);
            excess * excess
        })
        .sum())
}

#[cfg(test)]
mod tests;
