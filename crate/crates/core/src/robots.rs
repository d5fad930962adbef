//! Built-in robot families.
//!
//! Link proportions are in-repo constants loosely modelled on common
//! industrial arms; they are not manufacturer dimensions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{JointSpec, KinematicChain, RigidTransform, Vec3};

const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);
const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobotModel {
    Ur3Like,
    Ur5Like,
    Ur10Like,
    KukaLike,
}

impl RobotModel {
    pub const ALL: [RobotModel; 4] = [
        RobotModel::Ur3Like,
        RobotModel::Ur5Like,
        RobotModel::Ur10Like,
        RobotModel::KukaLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RobotModel::Ur3Like => "ur3like",
            RobotModel::Ur5Like => "ur5like",
            RobotModel::Ur10Like => "ur10like",
            RobotModel::KukaLike => "kukalike",
        }
    }

    /// Class label within the robot's own family corpus. The three UR-like
    /// sizes share one 3-class corpus; the Kuka-like family is a 1-class
    /// corpus of its own.
    pub fn type_label(self) -> usize {
        match self {
            RobotModel::Ur3Like => 0,
            RobotModel::Ur5Like => 1,
            RobotModel::Ur10Like => 2,
            RobotModel::KukaLike => 0,
        }
    }

    pub fn chain(self) -> KinematicChain {
        match self {
            RobotModel::Ur3Like => ur_size(0.5),
            RobotModel::Ur5Like => ur_chain(),
            RobotModel::Ur10Like => ur_size(1.5),
            RobotModel::KukaLike => kuka_chain(),
        }
    }

    pub fn palette(self) -> Palette {
        match self {
            RobotModel::KukaLike => Palette {
                primary: [205, 205, 210],
                accent: [235, 110, 25],
                accent_links: 1,
            },
            _ => Palette {
                primary: [190, 196, 204],
                accent: [45, 105, 200],
                accent_links: 1,
            },
        }
    }

    pub fn robot(self) -> Robot {
        Robot {
            model: self,
            chain: self.chain(),
            type_label: self.type_label(),
            palette: self.palette(),
        }
    }
}

impl fmt::Display for RobotModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RobotModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RobotModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown robot `{s}`")))
    }
}

/// Link colors: the last `accent_links` links use `accent`, the rest `primary`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub primary: [u8; 3],
    pub accent: [u8; 3],
    pub accent_links: usize,
}

impl Palette {
    pub fn link_color(&self, link: usize, n_links: usize) -> [u8; 3] {
        if link + self.accent_links < n_links {
            self.primary
        } else {
            self.accent
        }
    }
}

/// Everything the renderer needs to know about one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct Robot {
    pub model: RobotModel,
    pub chain: KinematicChain,
    pub type_label: usize,
    pub palette: Palette,
}

fn joint(axis: Vec3, t: [f64; 3], radius: f64, limit: f64) -> JointSpec {
    JointSpec::new(axis, RigidTransform::from_translation(Vec3::from_array(t)), radius)
        .with_limits(-limit, limit)
}

fn ur_chain() -> KinematicChain {
    use std::f64::consts::PI;
    KinematicChain::new(vec![
        joint(Z, [0.0, 0.0, 0.16], 0.075, PI),
        joint(Y, [0.0, 0.0, 0.42], 0.065, 0.5 * PI),
        joint(Y, [0.0, 0.0, 0.39], 0.055, 0.75 * PI),
        joint(Y, [0.0, 0.11, 0.0], 0.05, PI),
        joint(Z, [0.0, 0.0, 0.1], 0.05, PI),
        joint(Y, [0.0, 0.09, 0.0], 0.045, PI),
    ])
    .expect("built-in chain is valid")
}

/// Smaller arms of the family are stockier: radii grow with the square
/// root of the length scale.
fn ur_size(s: f64) -> KinematicChain {
    ur_chain().scaled(s, s.sqrt())
}

fn kuka_chain() -> KinematicChain {
    use std::f64::consts::PI;
    KinematicChain::new(vec![
        joint(Z, [0.0, 0.0, 0.2], 0.085, PI),
        joint(Y, [0.0, 0.0, 0.21], 0.08, 0.55 * PI),
        joint(Z, [0.0, 0.0, 0.2], 0.075, PI),
        joint(Y, [0.0, 0.0, 0.2], 0.07, 0.6 * PI),
        joint(Z, [0.0, 0.0, 0.2], 0.065, PI),
        joint(Y, [0.0, 0.0, 0.18], 0.06, 0.6 * PI),
        joint(Z, [0.0, 0.0, 0.09], 0.05, PI),
    ])
    .expect("built-in chain is valid")
}
