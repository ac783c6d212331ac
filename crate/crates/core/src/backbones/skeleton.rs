//! Articulator graphs from the bundled topology asset.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::tensor::Tensor;

#[derive(Deserialize)]
struct Graph {
    joints: usize,
    edges: Vec<[usize; 2]>,
}

#[derive(Deserialize)]
struct Asset {
    #[allow(dead_code)]
    version: u32,
    face: Graph,
    body: Graph,
    hand: Graph,
}

fn asset() -> &'static Asset {
    static A: OnceLock<Asset> = OnceLock::new();
    A.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/skeleton.json"))
            .expect("bundled skeleton asset is valid")
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Articulator {
    Face,
    Body,
    LeftHand,
    RightHand,
}

impl Articulator {
    pub const ALL: [Articulator; 4] = [
        Articulator::Face,
        Articulator::Body,
        Articulator::LeftHand,
        Articulator::RightHand,
    ];

    pub fn joints(self) -> std::ops::Range<usize> {
        use crate::dataio::keypoints::*;
        match self {
            Articulator::Face => FACE,
            Articulator::Body => BODY,
            Articulator::LeftHand => LEFT_HAND,
            Articulator::RightHand => RIGHT_HAND,
        }
    }

    pub fn edges(self) -> &'static [[usize; 2]] {
        let a = asset();
        match self {
            Articulator::Face => &a.face.edges,
            Articulator::Body => &a.body.edges,
            Articulator::LeftHand | Articulator::RightHand => &a.hand.edges,
        }
    }

    pub fn joint_count(self) -> usize {
        let a = asset();
        match self {
            Articulator::Face => a.face.joints,
            Articulator::Body => a.body.joints,
            Articulator::LeftHand | Articulator::RightHand => a.hand.joints,
        }
    }
}

/// `D⁻¹(I + E)` for the symmetric edge set `E`: row-stochastic with self loops.
pub fn normalized_adjacency(art: Articulator) -> Tensor {
    let n = art.joint_count();
    let mut a = Tensor::eye(n);
    for &[i, j] in art.edges() {
        a.data_mut()[i * n + j] = 1.0;
        a.data_mut()[j * n + i] = 1.0;
    }
    for r in 0..n {
        let s: f64 = a.row(r).iter().sum();
        a.data_mut()[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= s);
    }
    a
}
