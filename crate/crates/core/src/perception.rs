//! Synthetic detection, broadcast packets, multi-view reconstruction and
//! per-agent observation vectors.

use crate::crowdworld::{occluded, skeleton_of, CameraAgentState, HumanState, WorldState};
use crate::geometry3d::{
    project_unbounded, triangulate_dlt, triangulate_ransac, wrap_angle, CameraIntrinsics,
    CameraPose, Detection2D, Keypoint, Pixel, RansacParams, Skeleton3D, Vec3, View, joint,
    NUM_JOINTS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TriangulationMethod {
    #[default]
    Dlt,
    Ransac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    /// Std-dev of the i.i.d. Gaussian keypoint noise, pixels.
    pub noise_sigma: f64,
    /// Detections with fewer visible joints are dropped.
    pub min_visible_joints: usize,
    /// Reserved; only 0 is supported.
    pub packet_loss: f64,
    pub triangulation: TriangulationMethod,
    pub ransac: RansacParams,
    pub max_cameras: usize,
    pub max_humans: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 2.0,
            min_visible_joints: 4,
            packet_loss: 0.0,
            triangulation: TriangulationMethod::Dlt,
            ransac: RansacParams::default(),
            max_cameras: 5,
            max_humans: crate::crowdworld::MAX_HUMANS,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err("noise_sigma must be finite and non-negative".into());
        }
        if self.packet_loss != 0.0 {
            return Err("packet_loss simulation is not implemented; set it to 0".into());
        }
        if self.min_visible_joints == 0 || self.min_visible_joints > NUM_JOINTS {
            return Err("min_visible_joints must be in 1..=17".into());
        }
        if self.max_cameras == 0 || self.max_humans == 0 {
            return Err("observation slot counts must be positive".into());
        }
        if self.triangulation == TriangulationMethod::Ransac && self.ransac.iterations == 0 {
            return Err("ransac.iterations must be at least 1".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> ObservationLayout {
        ObservationLayout {
            max_cameras: self.max_cameras,
            max_humans: self.max_humans,
        }
    }
}

/// A 2D detection tagged with the (oracle) identity of the person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanDetection {
    pub human_id: usize,
    pub detection: Detection2D,
    pub confidence: f64,
}

/// What one camera broadcasts each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPacket {
    pub sender: usize,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub detections: Vec<HumanDetection>,
}

impl AgentPacket {
    pub fn detection_of(&self, human_id: usize) -> Option<&HumanDetection> {
        self.detections.iter().find(|d| d.human_id == human_id)
    }
}

/// Detects every human from one camera given precomputed skeletons.
pub fn detect_humans<R: Rng + ?Sized>(
    camera: &CameraAgentState,
    humans: &[HumanState],
    skeletons: &[Skeleton3D],
    noise_sigma: f64,
    min_visible: usize,
    rng: &mut R,
) -> Vec<HumanDetection> {
    let intr = &camera.intrinsics;
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("valid sigma");
    let mut out = Vec::new();
    for (human, skeleton) in humans.iter().zip(skeletons) {
        let mut keypoints = [Keypoint::HIDDEN; NUM_JOINTS];
        for (kp, p) in keypoints.iter_mut().zip(&skeleton.joints) {
            if occluded(camera, p, humans, human.id) {
                continue;
            }
            let Some(px) = project_unbounded(&camera.pose, intr, p) else {
                continue;
            };
            let noisy = if noise_sigma > 0.0 {
                Pixel::new(px.x + noise.sample(rng), px.y + noise.sample(rng))
            } else {
                px
            };
            if intr.contains(&noisy) {
                *kp = Keypoint {
                    u: noisy.x,
                    v: noisy.y,
                    visible: true,
                };
            }
        }
        let detection = Detection2D::from_keypoints(keypoints, intr);
        if detection.visible_count() >= min_visible {
            out.push(HumanDetection {
                human_id: human.id,
                detection,
                confidence: 1.0,
            });
        }
    }
    out
}

/// Detects every human in the world from `camera`.
pub fn detect<R: Rng + ?Sized>(
    camera: &CameraAgentState,
    world: &WorldState,
    noise_sigma: f64,
    min_visible: usize,
    rng: &mut R,
) -> Vec<HumanDetection> {
    let skeletons: Vec<Skeleton3D> = world.humans.iter().map(skeleton_of).collect();
    detect_humans(camera, &world.humans, &skeletons, noise_sigma, min_visible, rng)
}

/// Runs detection for every camera and wraps the results as packets.
pub fn broadcast<R: Rng + ?Sized>(world: &WorldState, config: &PerceptionConfig, rng: &mut R) -> Vec<AgentPacket> {
    let skeletons = world.skeletons();
    world
        .cameras
        .iter()
        .map(|cam| AgentPacket {
            sender: cam.id,
            pose: cam.pose,
            intrinsics: cam.intrinsics,
            detections: detect_humans(
                cam,
                &world.humans,
                &skeletons,
                config.noise_sigma,
                config.min_visible_joints,
                rng,
            ),
        })
        .collect()
}

/// A set of camera ids, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct CameraSet(pub u32);

impl CameraSet {
    pub fn full(n: usize) -> Self {
        CameraSet(if n >= 32 { u32::MAX } else { (1u32 << n) - 1 })
    }

    pub fn from_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        CameraSet(ids.into_iter().fold(0, |m, i| m | (1 << i)))
    }

    pub fn contains(&self, id: usize) -> bool {
        id < 32 && self.0 & (1 << id) != 0
    }

    pub fn insert(&mut self, id: usize) {
        self.0 |= 1 << id;
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..32).filter(move |&i| self.contains(i))
    }
}

/// Triangulation settings used by `reconstruct`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulator {
    pub method: TriangulationMethod,
    pub ransac: RansacParams,
    /// Base seed for the per-joint RANSAC generators.
    pub seed: u64,
}

impl Default for Triangulator {
    fn default() -> Self {
        Self {
            method: TriangulationMethod::Dlt,
            ransac: RansacParams::default(),
            seed: 0,
        }
    }
}

impl Triangulator {
    pub fn dlt() -> Self {
        Self::default()
    }

    fn triangulate(&self, views: &[View], human: usize, joint: usize, subset: CameraSet) -> Option<Vec3> {
        match self.method {
            TriangulationMethod::Dlt => triangulate_dlt(views).ok(),
            TriangulationMethod::Ransac => {
                let seed = self
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(((human as u64) << 40) ^ ((joint as u64) << 32) ^ subset.0 as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                triangulate_ransac(views, &self.ransac, &mut rng).ok()
            }
        }
    }
}

/// Reconstruction of one person from a camera subset.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanEstimate {
    pub human_id: usize,
    pub skeleton: Skeleton3D,
    /// True for joints triangulated this step; the rest were filled in.
    pub triangulated: [bool; NUM_JOINTS],
    /// Coordinate-wise median of the triangulated joints.
    pub position: Vec3,
    pub yaw: Option<f64>,
    /// Cameras of the subset that detected this person.
    pub cameras: CameraSet,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReconstructionResult {
    pub subset: CameraSet,
    /// Reconstructed humans, sorted by id.
    pub humans: Vec<HumanEstimate>,
    /// Humans seen by exactly one camera of the subset.
    pub unreconstructed: Vec<usize>,
}

impl ReconstructionResult {
    pub fn get(&self, human_id: usize) -> Option<&HumanEstimate> {
        self.humans.iter().find(|h| h.human_id == human_id)
    }
}

/// Last known estimate of each person, used to fill missing joints and to
/// keep people in the observation when they drop out of view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackMemory {
    pub tracks: BTreeMap<usize, TrackedHuman>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedHuman {
    pub skeleton: Skeleton3D,
    pub position: Vec3,
    pub yaw: f64,
    pub last_seen: usize,
}

impl TrackMemory {
    pub fn update(&mut self, result: &ReconstructionResult, step: usize) {
        for h in &result.humans {
            let yaw = h
                .yaw
                .or_else(|| self.tracks.get(&h.human_id).map(|t| t.yaw))
                .unwrap_or(0.0);
            self.tracks.insert(
                h.human_id,
                TrackedHuman {
                    skeleton: h.skeleton,
                    position: h.position,
                    yaw,
                    last_seen: step,
                },
            );
        }
    }

    pub fn get(&self, human_id: usize) -> Option<&TrackedHuman> {
        self.tracks.get(&human_id)
    }

    pub fn clear(&mut self) {
        self.tracks.clear();
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinate-wise median of a non-empty point set.
pub fn coordinate_median(points: &[Vec3]) -> Vec3 {
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let mut zs: Vec<f64> = points.iter().map(|p| p.z).collect();
    Vec3::new(median(&mut xs), median(&mut ys), median(&mut zs))
}

/// Facing direction from the shoulder line crossed with the spine.
pub fn skeleton_yaw(skeleton: &Skeleton3D) -> Option<f64> {
    let j = &skeleton.joints;
    let across = j[joint::LEFT_SHOULDER] - j[joint::RIGHT_SHOULDER];
    let mid_shoulder = 0.5 * (j[joint::LEFT_SHOULDER] + j[joint::RIGHT_SHOULDER]);
    let mid_hip = 0.5 * (j[joint::LEFT_HIP] + j[joint::RIGHT_HIP]);
    let facing = across.cross(&(mid_shoulder - mid_hip));
    (facing.x.hypot(facing.y) > 1e-9).then(|| facing.y.atan2(facing.x))
}

/// Reconstructs a single person from the cameras in `subset`.
///
/// Returns `None` unless at least two cameras of the subset detected the
/// person and at least one joint triangulated.
pub fn reconstruct_human(
    packets: &[AgentPacket],
    subset: CameraSet,
    human_id: usize,
    triangulator: &Triangulator,
    memory: Option<&TrackMemory>,
) -> Option<HumanEstimate> {
    let observers: Vec<(&AgentPacket, &HumanDetection)> = packets
        .iter()
        .filter(|p| subset.contains(p.sender))
        .filter_map(|p| p.detection_of(human_id).map(|d| (p, d)))
        .collect();
    if observers.len() < 2 {
        return None;
    }
    let cameras = CameraSet::from_ids(observers.iter().map(|(p, _)| p.sender));
    let mut joints = [None; NUM_JOINTS];
    let mut views = Vec::with_capacity(observers.len());
    for (j, slot) in joints.iter_mut().enumerate() {
        views.clear();
        for (p, d) in &observers {
            if let Some(pixel) = d.detection.keypoints[j].pixel() {
                views.push(View {
                    pose: p.pose,
                    intrinsics: p.intrinsics,
                    pixel,
                });
            }
        }
        if views.len() >= 2 {
            *slot = triangulator
                .triangulate(&views, human_id, j, subset)
                .filter(|p| p.iter().all(|c| c.is_finite()));
        }
    }
    let found: Vec<Vec3> = joints.iter().flatten().copied().collect();
    if found.is_empty() {
        return None;
    }
    let position = coordinate_median(&found);
    let previous = memory.and_then(|m| m.get(human_id));
    let mut triangulated = [false; NUM_JOINTS];
    let skeleton = Skeleton3D::new(std::array::from_fn(|j| match joints[j] {
        Some(p) => {
            triangulated[j] = true;
            p
        }
        None => previous.map_or(position, |t| t.skeleton.joints[j]),
    }));
    let yaw = skeleton_yaw(&skeleton);
    Some(HumanEstimate {
        human_id,
        skeleton,
        triangulated,
        position,
        yaw,
        cameras,
    })
}

/// Reconstructs every person seen by the cameras in `subset`.
pub fn reconstruct(
    packets: &[AgentPacket],
    subset: CameraSet,
    triangulator: &Triangulator,
    memory: Option<&TrackMemory>,
) -> ReconstructionResult {
    let mut ids: Vec<usize> = packets
        .iter()
        .filter(|p| subset.contains(p.sender))
        .flat_map(|p| p.detections.iter().map(|d| d.human_id))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let mut result = ReconstructionResult {
        subset,
        ..Default::default()
    };
    for id in ids {
        match reconstruct_human(packets, subset, id, triangulator, memory) {
            Some(h) => result.humans.push(h),
            None => result.unreconstructed.push(id),
        }
    }
    result
}

/// Floats per camera slot.
pub const CAMERA_SLOT: usize = 9;
/// Floats per human slot.
pub const HUMAN_SLOT: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationLayout {
    pub max_cameras: usize,
    pub max_humans: usize,
}

impl ObservationLayout {
    pub fn len(&self) -> usize {
        self.max_cameras * CAMERA_SLOT + self.max_humans * HUMAN_SLOT
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn camera_offset(&self, slot: usize) -> usize {
        slot * CAMERA_SLOT
    }

    pub fn human_offset(&self, slot: usize) -> usize {
        self.max_cameras * CAMERA_SLOT + slot * HUMAN_SLOT
    }
}

/// One agent's flat feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalObservation(pub Vec<f64>);

const POSITION_SCALE: f64 = 10.0;

fn write_camera(out: &mut [f64], pose: &CameraPose, is_self: bool) {
    let p = pose.position / POSITION_SCALE;
    out.copy_from_slice(&[
        p.x,
        p.y,
        p.z,
        pose.yaw.sin(),
        pose.yaw.cos(),
        pose.pitch.sin(),
        pose.pitch.cos(),
        if is_self { 1.0 } else { 0.0 },
        1.0,
    ]);
}

/// Builds agent `agent_id`'s observation from the broadcast packets and the
/// team's tracked estimates. Slot 0 of the human block is reserved for the
/// target; pedestrians follow by id.
pub fn assemble_observation(
    agent_id: usize,
    packets: &[AgentPacket],
    tracks: &TrackMemory,
    target_id: usize,
    layout: &ObservationLayout,
) -> LocalObservation {
    let mut obs = vec![0.0; layout.len()];
    let Some(me) = packets.iter().find(|p| p.sender == agent_id) else {
        return LocalObservation(obs);
    };
    write_camera(&mut obs[0..CAMERA_SLOT], &me.pose, true);
    let mut peers: Vec<&AgentPacket> = packets.iter().filter(|p| p.sender != agent_id).collect();
    peers.sort_by_key(|p| p.sender);
    for (slot, peer) in peers.iter().take(layout.max_cameras.saturating_sub(1)).enumerate() {
        let o = layout.camera_offset(slot + 1);
        write_camera(&mut obs[o..o + CAMERA_SLOT], &peer.pose, false);
    }

    let mut order: Vec<usize> = tracks.tracks.keys().copied().filter(|&id| id != target_id).collect();
    order.sort_unstable();
    let slots = std::iter::once((0, target_id))
        .chain(order.into_iter().enumerate().map(|(k, id)| (k + 1, id)))
        .take_while(|&(slot, _)| slot < layout.max_humans);
    for (slot, id) in slots {
        let Some(track) = tracks.get(id) else {
            continue;
        };
        let o = layout.human_offset(slot);
        let out = &mut obs[o..o + HUMAN_SLOT];
        let own = me.detection_of(id);
        if let Some(d) = own {
            out[0..4].copy_from_slice(&d.detection.bbox);
        }
        let local = me.pose.to_camera(&track.position) / POSITION_SCALE;
        let world = track.position / POSITION_SCALE;
        let local_yaw = wrap_angle(track.yaw - me.pose.yaw);
        out[4..7].copy_from_slice(local.as_slice());
        out[7..10].copy_from_slice(world.as_slice());
        out[10] = local_yaw.sin();
        out[11] = local_yaw.cos();
        out[12] = track.yaw.sin();
        out[13] = track.yaw.cos();
        out[14] = if own.is_some() { 1.0 } else { 0.0 };
        out[15] = if id == target_id { 1.0 } else { 0.0 };
        out[16] = own.map_or(0.0, |d| d.detection.visible_count() as f64 / NUM_JOINTS as f64);
        out[17] = own.map_or(0.0, |d| d.confidence);
    }
    LocalObservation(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crowdworld::WorldConfig;
    use crate::geometry3d::mpjpe;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;
    use std::sync::Arc;

    fn human(id: usize, x: f64, y: f64) -> HumanState {
        HumanState {
            id,
            position: Vec3::new(x, y, 0.0),
            heading: 0.3,
            speed: 1.0,
            gait_phase: 0.4,
            is_target: id == 0,
            radius: 0.3,
            height: 1.7,
            waypoint: Vector2::zeros(),
        }
    }

    fn camera(id: usize, position: Vec3, look: Vec3) -> CameraAgentState {
        CameraAgentState {
            id,
            pose: CameraPose::looking_at(position, look),
            intrinsics: CameraIntrinsics::default(),
        }
    }

    fn ring(n: usize) -> Vec<CameraAgentState> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 2.0 * std::f64::consts::PI / n as f64;
                camera(i, Vec3::new(4.0 * a.cos(), 4.0 * a.sin(), 2.5), Vec3::new(0.0, 0.0, 1.0))
            })
            .collect()
    }

    fn packets(cams: &[CameraAgentState], humans: &[HumanState], sigma: f64) -> Vec<AgentPacket> {
        let skeletons: Vec<Skeleton3D> = humans.iter().map(skeleton_of).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        cams.iter()
            .map(|c| AgentPacket {
                sender: c.id,
                pose: c.pose,
                intrinsics: c.intrinsics,
                detections: detect_humans(c, humans, &skeletons, sigma, 4, &mut rng),
            })
            .collect()
    }

    #[test]
    fn zero_noise_matches_projection() {
        let humans = vec![human(0, 0.0, 0.0)];
        let cam = ring(1).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dets = detect_humans(&cam, &humans, &[skeleton_of(&humans[0])], 0.0, 4, &mut rng);
        assert_eq!(dets.len(), 1);
        let sk = skeleton_of(&humans[0]);
        for (kp, p) in dets[0].detection.keypoints.iter().zip(&sk.joints) {
            let px = crate::geometry3d::project(&cam.pose, &cam.intrinsics, p).unwrap();
            assert!(kp.visible);
            assert_eq!((kp.u, kp.v), (px.x, px.y));
        }
    }

    #[test]
    fn hidden_human_not_detected() {
        // Target directly behind a pedestrian along the camera's line of sight.
        let humans = vec![human(0, 3.0, 0.0), human(1, 1.5, 0.0)];
        let cam = camera(0, Vec3::new(-1.0, 0.0, 0.85), Vec3::new(3.0, 0.0, 0.85));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sks: Vec<_> = humans.iter().map(skeleton_of).collect();
        let dets = detect_humans(&cam, &humans, &sks, 0.0, 4, &mut rng);
        assert!(dets.iter().all(|d| d.human_id != 0));
        assert!(dets.iter().any(|d| d.human_id == 1));
    }

    #[test]
    fn noise_matches_rayleigh_mean() {
        let humans = vec![human(0, 0.0, 0.0)];
        let cam = ring(1).remove(0);
        let sk = skeleton_of(&humans[0]);
        let exact: Vec<Pixel> = sk
            .joints
            .iter()
            .map(|p| crate::geometry3d::project(&cam.pose, &cam.intrinsics, p).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 2.0;
        let (mut sum, mut count) = (0.0, 0usize);
        while count < 10_000 {
            let d = detect_humans(&cam, &humans, &[sk], sigma, 4, &mut rng);
            for (kp, e) in d[0].detection.keypoints.iter().zip(&exact) {
                if let Some(px) = kp.pixel() {
                    sum += (px - e).norm();
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        let rayleigh = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean / rayleigh - 1.0).abs() < 0.03, "mean {mean} vs {rayleigh}");
    }

    #[test]
    fn single_camera_subset_reconstructs_nothing() {
        let humans = vec![human(0, 0.0, 0.0), human(1, 1.5, 1.0)];
        let cams = ring(3);
        let pk = packets(&cams, &humans, 0.0);
        let r = reconstruct(&pk, CameraSet::from_ids([1]), &Triangulator::dlt(), None);
        assert!(r.humans.is_empty());
    }

    #[test]
    fn three_clean_cameras_sub_millimetre() {
        let humans = vec![human(0, 0.2, -0.3)];
        let cams = ring(3);
        let pk = packets(&cams, &humans, 0.0);
        let r = reconstruct(&pk, CameraSet::full(3), &Triangulator::dlt(), None);
        let est = r.get(0).unwrap();
        assert!(est.triangulated.iter().all(|&t| t));
        assert!(mpjpe(&est.skeleton, &skeleton_of(&humans[0])) < 1.0);
        assert_relative_eq!(est.yaw.unwrap(), 0.3, epsilon = 1e-6);
    }

    #[test]
    fn occluded_camera_contributes_nothing() {
        let humans = vec![human(0, 0.0, 0.0)];
        let mut cams = ring(2);
        // Camera 2 looks away from the scene.
        cams.push(camera(2, Vec3::new(0.0, -4.0, 2.0), Vec3::new(0.0, -9.0, 2.0)));
        let pk = packets(&cams, &humans, 1.0);
        assert!(pk[2].detections.is_empty());
        let a = reconstruct(&pk, CameraSet::from_ids([0, 1]), &Triangulator::dlt(), None);
        let b = reconstruct(&pk, CameraSet::from_ids([0, 1, 2]), &Triangulator::dlt(), None);
        assert_eq!(a.humans[0].skeleton, b.humans[0].skeleton);
    }

    #[test]
    fn position_is_joint_median() {
        let humans = vec![human(0, 1.0, 1.0)];
        let cams = ring(4);
        let pk = packets(&cams, &humans, 2.0);
        let r = reconstruct(&pk, CameraSet::full(4), &Triangulator::dlt(), None);
        let est = r.get(0).unwrap();
        let pts: Vec<Vec3> = est.skeleton.joints.to_vec();
        assert_eq!(est.position, coordinate_median(&pts));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn tracks_for(humans: &[HumanState]) -> TrackMemory {
        let mut m = TrackMemory::default();
        for h in humans {
            m.tracks.insert(
                h.id,
                TrackedHuman {
                    skeleton: skeleton_of(h),
                    position: h.position,
                    yaw: h.heading,
                    last_seen: 0,
                },
            );
        }
        m
    }

    #[test]
    fn golden_local_position() {
        let mut t = human(0, 2.0, 3.0);
        t.heading = 0.0;
        let cam = CameraAgentState {
            id: 0,
            pose: CameraPose::new(Vec3::new(0.0, 0.0, 3.0), 0.0, 0.0),
            intrinsics: CameraIntrinsics::default(),
        };
        let pk = vec![AgentPacket {
            sender: 0,
            pose: cam.pose,
            intrinsics: cam.intrinsics,
            detections: vec![],
        }];
        let layout = ObservationLayout {
            max_cameras: 5,
            max_humans: 7,
        };
        let obs = assemble_observation(0, &pk, &tracks_for(&[t]), 0, &layout);
        let o = layout.human_offset(0);
        let got = &obs.0[o + 4..o + 10];
        let want = [-0.3, 0.3, 0.2, 0.2, 0.3, 0.0];
        for (g, w) in got.iter().zip(want) {
            assert_relative_eq!(*g, w, epsilon = 1e-12);
        }
        assert_eq!(obs.0[o + 15], 1.0);
        assert_eq!(obs.0[o + 14], 0.0);
    }

    #[test]
    fn layout_rules() {
        let humans = vec![human(0, 0.0, 0.0)];
        let cams = ring(3);
        let pk = packets(&cams, &humans, 0.0);
        let layout = ObservationLayout {
            max_cameras: 5,
            max_humans: 7,
        };
        let tracks = tracks_for(&humans);
        for agent in 0..3 {
            let obs = assemble_observation(agent, &pk, &tracks, 0, &layout);
            assert_eq!(obs.0.len(), 5 * 9 + 7 * 18);
            for slot in 0..5 {
                let is_self = obs.0[layout.camera_offset(slot) + 7];
                assert_eq!(is_self, if slot == 0 { 1.0 } else { 0.0 });
                let valid = obs.0[layout.camera_offset(slot) + 8];
                assert_eq!(valid, if slot < 3 { 1.0 } else { 0.0 });
            }
            assert!(obs.0[layout.human_offset(1)..].iter().all(|&x| x == 0.0));
            assert_eq!(obs.0[layout.camera_offset(0)], cams[agent].pose.position.x / 10.0);
        }
    }

    #[test]
    fn pedestrian_relabel_permutes_slots() {
        let humans = vec![human(0, 0.0, 0.0), human(1, 1.0, 2.0), human(2, -1.5, 0.5)];
        let cams = ring(3);
        let pk = packets(&cams, &humans, 0.0);
        let layout = ObservationLayout {
            max_cameras: 5,
            max_humans: 7,
        };
        let a = assemble_observation(0, &pk, &tracks_for(&humans), 0, &layout);
        let mut swapped = humans.clone();
        swapped[1].id = 2;
        swapped[2].id = 1;
        let pk2 = packets(&cams, &swapped, 0.0);
        let b = assemble_observation(0, &pk2, &tracks_for(&swapped), 0, &layout);
        let h = |s| layout.human_offset(s);
        assert_eq!(a.0[..h(1)], b.0[..h(1)]);
        assert_eq!(a.0[h(1)..h(2)], b.0[h(2)..h(3)]);
        assert_eq!(a.0[h(2)..h(3)], b.0[h(1)..h(2)]);
    }

    #[test]
    fn broadcast_covers_world() {
        let cfg = WorldConfig {
            human_count: [2, 2],
            num_cameras: 3,
            ..WorldConfig::default()
        };
        let poses: Vec<CameraPose> = ring(3).iter().map(|c| c.pose).collect();
        let w = WorldState::reset(Arc::new(cfg), 5, &poses);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pk = broadcast(&w, &PerceptionConfig::default(), &mut rng);
        assert_eq!(pk.len(), 3);
        assert!(pk.iter().all(|p| p.detections.iter().all(|d| d.human_id < 2)));
    }
}
