//! Built-in experiment scenarios.
//!
//! All planar runs share the same cast: a velocity-controlled robot starting
//! at (-5, -0.5, 0) and an obstacle sweeping in from (5, 0, 0) at
//! 4 m/s along -x. Variants differ in obstacle shape, control limits, noise,
//! and controller: plain TVCBFQP, noise-robust, actuation-inflated, and the
//! sphere-model MPC baseline. A desk-scale planar arm scenario exercises the
//! multi-segment constraint assembly.

use nalgebra::Vector3;

use crate::cbf::CbfConfig;
use crate::control::MpcConfig;
use crate::estimation::ProcessNoise;
use crate::geometry::{ConvexPrimitive, Pose};
use crate::sim::arm::{ArmSegment, PlanarArm};
use crate::sim::{
    EstimatorMode,
    NoiseSpec, ObstacleSpec, ReferenceController, RobotModel, Scenario, SafetyController,
    ScriptedMotion,
};
use crate::{Error, Result};

/// Names and one-line descriptions of the built-in scenarios.
pub fn builtin_names() -> Vec<(&'static str, &'static str)> {
    vec![
        (
            "moving_circles",
            "circle robot crosses a faster oncoming circle under the TVCBFQP filter",
        ),
        (
            "moving_circles_noisy",
            "moving circles with heavy position noise, EKF tracking, and the k=3 worst-case barrier",
        ),
        (
            "moving_circles_actuation",
            "moving circles with [-1,1] m/s velocity limits and the relative-velocity inflated barrier (b=1)",
        ),
        (
            "moving_rectangle",
            "sphere robot dodges a moving rectangular slab on the way to a target (TVCBFQP)",
        ),
        (
            "moving_rectangle_mpc",
            "the rectangle task under the sphere-model linear-MPC baseline",
        ),
        (
            "planar_arm_box",
            "three-link planar arm retreats from a box sweeping over its workspace",
        ),
    ]
}

pub fn builtin_scenarios() -> Vec<Scenario> {
    builtin_names()
        .iter()
        .map(|(name, _)| builtin(name).expect("builtin scenario constructs"))
        .collect()
}

/// Builds one built-in scenario by name.
pub fn builtin(name: &str) -> Result<Scenario> {
    match name {
        "moving_circles" => Ok(moving_circles()),
        "moving_circles_noisy" => Ok(moving_circles_noisy()),
        "moving_circles_actuation" => Ok(moving_circles_actuation()),
        "moving_rectangle" => Ok(moving_rectangle(false)),
        "moving_rectangle_mpc" => Ok(moving_rectangle(true)),
        "planar_arm_box" => Ok(planar_arm_box()),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

fn circle_robot() -> RobotModel {
    RobotModel::PlanarIntegrator {
        primitive: ConvexPrimitive::sphere(0.5).expect("radius valid"),
        start: Vector3::new(-5.0, -0.5, 0.0),
    }
}

fn circle_obstacle() -> ObstacleSpec {
    ObstacleSpec {
        primitive: ConvexPrimitive::sphere(1.5).expect("radius valid"),
        motion: ScriptedMotion {
            initial_pose: Pose::from_position(Vector3::new(5.0, 0.0, 0.0)),
            linear_velocity: Vector3::new(-4.0, 0.0, 0.0),
            angular_velocity: Vector3::zeros(),
        },
    }
}

fn description_of(name: &str) -> String {
    builtin_names()
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, d)| d.to_string())
        .unwrap_or_default()
}

fn moving_circles() -> Scenario {
    Scenario {
        name: "moving_circles".into(),
        description: description_of("moving_circles"),
        robot: circle_robot(),
        obstacles: vec![circle_obstacle()],
        reference: ReferenceController::Constant {
            control: vec![2.0, 0.0],
        },
        safety: SafetyController::TvcbfQp(CbfConfig::default()),
        noise: None,
        control_lower: vec![-10.0, -10.0],
        control_upper: vec![10.0, 10.0],
        unlimited_filter: false,
        dt: 0.01,
        duration: 9.0,
        target: None,
        seed: 42,
    }
}

fn moving_circles_noisy() -> Scenario {
    let mut sc = moving_circles();
    sc.name = "moving_circles_noisy".into();
    sc.description = description_of("moving_circles_noisy");
    sc.noise = Some(NoiseSpec {
        position_variance: [0.5, 0.5, 0.5],
        orientation_std: 1e-3,
        estimator: EstimatorMode::default(),
        process: ProcessNoise::default(),
    });
    // Tight enough that estimation error matters at the squeeze; a controller
    // that trusts raw measurements grazes or clips the true obstacle here.
    sc.control_lower = vec![-1.5, -1.5];
    sc.control_upper = vec![1.5, 1.5];
    let mut cfg = CbfConfig::default();
    cfg.noise_robust = true;
    cfg.k = 3.0;
    sc.safety = SafetyController::TvcbfQp(cfg);
    sc
}

fn moving_circles_actuation() -> Scenario {
    let mut sc = moving_circles();
    sc.name = "moving_circles_actuation".into();
    sc.description = description_of("moving_circles_actuation");
    sc.control_lower = vec![-1.0, -1.0];
    sc.control_upper = vec![1.0, 1.0];
    let mut cfg = CbfConfig::default();
    cfg.actuation_inflated = true;
    cfg.b = 1.0;
    sc.safety = SafetyController::TvcbfQp(cfg);
    sc
}

fn rectangle_obstacle() -> ObstacleSpec {
    ObstacleSpec {
        primitive: ConvexPrimitive::cuboid(Vector3::new(1.5, 0.2, 1.0)).expect("box valid"),
        motion: ScriptedMotion {
            initial_pose: Pose::from_position(Vector3::new(5.0, 0.0, 0.0)),
            linear_velocity: Vector3::new(-4.0, 0.0, 0.0),
            angular_velocity: Vector3::zeros(),
        },
    }
}

fn moving_rectangle(mpc: bool) -> Scenario {
    let obstacle = rectangle_obstacle();
    let safety = if mpc {
        SafetyController::Mpc(MpcConfig {
            horizon: 1.5,
            sample_time: 0.05,
            d_risk: 1.5,
            d_obs: 1.5,
            w_target: 0.1,
            w_effort: 0.1,
            w_avoid: 10.0,
            robot_radius: 0.5,
            obstacle_radius: obstacle.primitive.bounding_radius(),
        })
    } else {
        let mut cfg = CbfConfig::default();
        cfg.actuation_inflated = true;
        cfg.b = 1e-3;
        SafetyController::TvcbfQp(cfg)
    };
    let name = if mpc {
        "moving_rectangle_mpc"
    } else {
        "moving_rectangle"
    };
    Scenario {
        name: name.into(),
        description: description_of(name),
        robot: circle_robot(),
        obstacles: vec![obstacle],
        reference: ReferenceController::Proportional { kp: 2.0 },
        safety,
        noise: None,
        control_lower: vec![-1.0, -1.0],
        control_upper: vec![1.0, 1.0],
        unlimited_filter: false,
        dt: 0.01,
        duration: 30.0,
        target: Some(Vector3::new(20.0, -0.5, 0.0)),
        seed: 42,
    }
}

fn planar_arm_box() -> Scenario {
    let arm = PlanarArm {
        base: Vector3::zeros(),
        segments: vec![
            ArmSegment {
                length: 0.4,
                radius: 0.05,
            };
            3
        ],
        initial_angles: vec![0.6, -0.4, -0.3],
    };
    let q_bar = arm.initial_angles.clone();
    Scenario {
        name: "planar_arm_box".into(),
        description: description_of("planar_arm_box"),
        robot: RobotModel::PlanarArm(arm),
        obstacles: vec![ObstacleSpec {
            primitive: ConvexPrimitive::cuboid(Vector3::new(0.125, 0.1, 0.1))
                .expect("box valid"),
            motion: ScriptedMotion {
                // Sweeps through the workspace like a waved board: grazes the
                // outstretched links around t = 1.5..3 s, then rises away.
                initial_pose: Pose::from_position(Vector3::new(2.0, 0.40, 0.0)),
                linear_velocity: Vector3::new(-0.5, 0.03, 0.0),
                angular_velocity: Vector3::zeros(),
            },
        }],
        reference: ReferenceController::JointPd {
            q_bar,
            kp: vec![3.0, 3.0, 3.0],
            kd: vec![1.0, 1.0, 1.0],
        },
        safety: SafetyController::TvcbfQp(CbfConfig::default()),
        noise: None,
        control_lower: vec![-1.0, -1.0, -1.0],
        control_upper: vec![1.0, 1.0, 1.0],
        unlimited_filter: false,
        dt: 0.01,
        duration: 8.0,
        target: None,
        seed: 42,
    }
}
