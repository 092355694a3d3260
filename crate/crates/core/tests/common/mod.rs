//! Random generators shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use landmap::geometry::{CameraIntrinsics, Pose};
use landmap::map::{
    normalize_descriptor, BuilderConfig, Covisibility, Keypoint2D, Landmark, LandmarkLabel, MapPoint, Observation,
    SceneMap, UpAxis, VirtualReferenceFrame,
};
use landmap::recognition::{CentroidModel, Linear, ModelKind, RecognizerModel, TransformerWeights};

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

pub fn f32_uniform(rng: &mut impl Rng, lo: f32, hi: f32) -> f64 {
    rng.random_range(lo..hi) as f64
}

pub fn random_transformer(rng: &mut impl Rng, d: usize, h: usize, heads: usize, blocks: usize, c: usize) -> TransformerWeights {
    let mut w = TransformerWeights::zeros(d, h, heads, blocks, c);
    let mut fill = |l: &mut Linear| {
        l.weight.iter_mut().for_each(|v| *v = f32_uniform(rng, -0.5, 0.5));
        l.bias.iter_mut().for_each(|v| *v = f32_uniform(rng, -0.1, 0.1));
    };
    fill(&mut w.input_proj);
    w.pos.iter_mut().for_each(&mut fill);
    for b in &mut w.blocks {
        for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.out, &mut b.ffn0, &mut b.ffn1] {
            fill(l);
        }
    }
    fill(&mut w.head);
    for b in &mut w.blocks {
        for n in [&mut b.norm1, &mut b.norm2] {
            n.weight.iter_mut().for_each(|v| *v = f32_uniform(rng, 0.5, 1.5));
            n.bias.iter_mut().for_each(|v| *v = f32_uniform(rng, -0.1, 0.1));
        }
    }
    w
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let mut d: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    normalize_descriptor(&mut d);
    d
}

pub fn random_keypoints(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<Keypoint2D> {
    (0..n)
        .map(|_| Keypoint2D {
            u: rng.random_range(0.0..640.0),
            v: rng.random_range(0.0..480.0),
            score: rng.random(),
            descriptor: random_unit(rng, dim),
            point3d_id: None,
        })
        .collect()
}

pub fn random_pose(rng: &mut impl Rng) -> Pose {
    Pose::new(random_rotation(rng), Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0)))
}

pub fn random_map(rng: &mut impl Rng) -> SceneMap {
    let num_landmarks = rng.random_range(1..6usize);
    let dim = rng.random_range(1..24usize);
    let mut points = Vec::new();
    let mut landmarks = Vec::new();
    let mut next_id = rng.random_range(0..1000u64);
    for label in 1..=num_landmarks as LandmarkLabel {
        let frame = rng.random_range(0..50u64);
        let mut ids = Vec::new();
        for _ in 0..rng.random_range(1..8) {
            next_id += rng.random_range(1..10);
            ids.push(next_id);
            let mut track = vec![Observation {
                frame_id: frame,
                keypoint_index: rng.random_range(0..4000),
            }];
            for _ in 0..rng.random_range(0..3) {
                track.push(Observation {
                    frame_id: rng.random_range(50..100),
                    keypoint_index: rng.random_range(0..4000),
                });
            }
            points.push(MapPoint {
                id: next_id,
                position: Vector3::from_fn(|_, _| rng.random_range(-100.0f32..100.0)),
                descriptor: random_unit(rng, dim),
                track,
                landmark_label: label,
            });
        }
        landmarks.push(Landmark {
            label,
            point_ids: ids,
            vrf: VirtualReferenceFrame {
                intrinsics: CameraIntrinsics::new(
                    rng.random_range(100.0..900.0),
                    rng.random_range(100.0..900.0),
                    rng.random_range(100.0..300.0),
                    rng.random_range(100.0..200.0),
                    rng.random_range(320..2000),
                    rng.random_range(240..2000),
                )
                .unwrap(),
                pose: random_pose(rng),
                source_frame_id: frame,
            },
            centroid2d: Vector2::new(rng.random(), rng.random()),
        });
    }
    let edges: Vec<_> = (0..num_landmarks * 2)
        .map(|_| (rng.random_range(1..=num_landmarks as LandmarkLabel), rng.random_range(1..=num_landmarks as LandmarkLabel)))
        .collect();
    let map = SceneMap {
        landmarks,
        points,
        covisibility: Covisibility::from_edges(num_landmarks, edges),
        build_config: BuilderConfig {
            lambda_l: num_landmarks,
            lambda_n: rng.random_range(1..50),
            lambda_v: rng.random_range(0.001..1.0),
            lambda_o: rng.random_range(0.0..60.0),
            up_axis: [UpAxis::X, UpAxis::Y, UpAxis::Z][rng.random_range(0..3)],
            enable_pruning: rng.random(),
            seed: rng.random(),
        },
        descriptor_dim: dim,
    };
    map.validate().unwrap();
    map
}

pub fn random_model(rng: &mut impl Rng) -> RecognizerModel {
    let c = rng.random_range(2..8);
    if rng.random() {
        let d = rng.random_range(1..24);
        RecognizerModel {
            descriptor_dim: d,
            num_classes: c,
            kind: ModelKind::Centroid(CentroidModel {
                centroids: (1..c).map(|_| random_unit(rng, d)).collect(),
                temperature: rng.random_range(0.01..1.0),
                null_bias: rng.random_range(0.0..1.0),
            }),
        }
    } else {
        let heads = rng.random_range(1..3);
        let h = heads * rng.random_range(1..5);
        let (d, blocks) = (rng.random_range(1..12), rng.random_range(0..3));
        let w = random_transformer(rng, d, h, heads, blocks, c);
        RecognizerModel::transformer(w).unwrap()
    }
}
