//! TOML run configuration. Every field is optional; omitted values fall
//! back to the experimentally identified model and the published loop
//! settings. Unknown keys are rejected so typos fail loudly.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::axis_model::{AxisParams, ContinuousModel};
use crate::ident::PdGains;
use crate::mpc::{InputBounds, MpcWeights, OMEGA_CAP};
use crate::sim::{Scenario, SimConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub timing: TimingSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub pd: PdSection,
    #[serde(default)]
    pub mpc: MpcSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub link: LinkSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Per-axis drag coefficients (x, y, z).
    pub alpha: [f64; 3],
    /// Per-axis input gains (x, y, z).
    pub beta: [f64; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ContinuousModel::bebop2();
        Self {
            alpha: [m.x_axis.alpha, m.y_axis.alpha, m.z_axis.alpha],
            beta: [m.x_axis.beta, m.y_axis.beta, m.z_axis.beta],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    pub sensor_hz: f64,
    pub control_dt: f64,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self {
            sensor_hz: 120.0,
            control_dt: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub u_max: [f64; 3],
    pub yaw_max: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        let b = InputBounds::default();
        Self {
            u_max: b.u_max,
            yaw_max: b.yaw_max,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PdSection {
    /// Proportional gains (x, y, z, yaw).
    pub kp: [f64; 4],
    /// Derivative gains (x, y, z, yaw).
    pub kd: [f64; 4],
}

impl Default for PdSection {
    fn default() -> Self {
        let g = PdGains::default();
        Self {
            kp: [g.kp_x, g.kp_y, g.kp_z, g.kp_yaw],
            kd: [g.kd_x, g.kd_y, g.kd_z, g.kd_yaw],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    /// Diagonal of the state weight (6 entries).
    pub qx: [f64; 6],
    /// Diagonal of the input weight (3 entries).
    pub qu: [f64; 3],
    /// Diagonal of the reference-offset weight (3 entries).
    pub qr: [f64; 3],
    /// Diagonal of the artificial-steady-state weight (6 entries).
    pub qfx: [f64; 6],
    /// Diagonal of the artificial-steady-input weight (3 entries).
    pub qfu: [f64; 3],
    pub omega_cap: usize,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon: 10,
            qx: [5.0; 6],
            qu: [35.0, 20.0, 1.0],
            qr: [500.0; 3],
            qfx: [1.0; 6],
            qfu: [0.0; 3],
            omega_cap: OMEGA_CAP,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub noise_sigma: f64,
    pub delay_steps: usize,
    pub seed: u64,
    pub duration: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            noise_sigma: 2e-5,
            delay_steps: 1,
            seed: 0,
            duration: 60.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// `"lemniscate"` or `"waypoints"`.
    pub kind: String,
    pub a: f64,
    pub period: f64,
    pub z_ref: f64,
    /// Waypoints as `[start_time, x, y, z]` rows.
    #[serde(default)]
    pub waypoints: Vec<[f64; 4]>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            kind: "lemniscate".into(),
            a: 1.0,
            period: 30.0,
            z_ref: 1.5,
            waypoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub plant_addr: String,
    pub ctrl_addr: String,
    pub time_scale: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            plant_addr: "127.0.0.1:9000".into(),
            ctrl_addr: "127.0.0.1:9001".into(),
            time_scale: 1.0,
        }
    }
}

impl AppConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn continuous_model(&self) -> Result<ContinuousModel> {
        Ok(ContinuousModel::new(
            AxisParams::new(self.model.alpha[0], self.model.beta[0])?,
            AxisParams::new(self.model.alpha[1], self.model.beta[1])?,
            AxisParams::new(self.model.alpha[2], self.model.beta[2])?,
        ))
    }

    pub fn input_bounds(&self) -> InputBounds {
        InputBounds {
            u_max: self.bounds.u_max,
            yaw_max: self.bounds.yaw_max,
        }
    }

    pub fn pd_gains(&self) -> PdGains {
        PdGains {
            kp_x: self.pd.kp[0],
            kp_y: self.pd.kp[1],
            kp_z: self.pd.kp[2],
            kp_yaw: self.pd.kp[3],
            kd_x: self.pd.kd[0],
            kd_y: self.pd.kd[1],
            kd_z: self.pd.kd[2],
            kd_yaw: self.pd.kd[3],
        }
    }

    pub fn mpc_weights(&self) -> MpcWeights {
        use nalgebra::{DMatrix, DVector};
        MpcWeights {
            horizon: self.mpc.horizon,
            qx: DMatrix::from_diagonal(&DVector::from_row_slice(&self.mpc.qx)),
            qu: DMatrix::from_diagonal(&DVector::from_row_slice(&self.mpc.qu)),
            qr: DMatrix::from_diagonal(&DVector::from_row_slice(&self.mpc.qr)),
            qfx: DMatrix::from_diagonal(&DVector::from_row_slice(&self.mpc.qfx)),
            qfu: DMatrix::from_diagonal(&DVector::from_row_slice(&self.mpc.qfu)),
        }
    }

    /// Simulation settings for the MPC tracking loop.
    pub fn sim_config(&self) -> Result<SimConfig> {
        let cfg = SimConfig {
            model: self.continuous_model()?,
            sensor_dt: 1.0 / self.timing.sensor_hz,
            control_dt: self.timing.control_dt,
            noise_sigma: self.sim.noise_sigma,
            delay_steps: self.sim.delay_steps,
            bounds: self.input_bounds(),
            seed: self.sim.seed,
            duration: self.sim.duration,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        match self.scenario.kind.as_str() {
            "lemniscate" => Ok(Scenario::Lemniscate {
                a: self.scenario.a,
                period: self.scenario.period,
                z_ref: self.scenario.z_ref,
            }),
            "waypoints" => {
                if self.scenario.waypoints.is_empty() {
                    return Err(Error::Config(
                        "waypoints scenario needs at least one [t, x, y, z] row".into(),
                    ));
                }
                Ok(Scenario::Waypoints(
                    self.scenario
                        .waypoints
                        .iter()
                        .map(|w| (w[0], Vector3::new(w[1], w[2], w[3])))
                        .collect(),
                ))
            }
            other => Err(Error::Config(format!("unknown scenario kind '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let cfg = AppConfig::default();
        assert_eq!(cfg.model.alpha, [0.0527, 0.0187, 1.7873]);
        assert_eq!(cfg.model.beta, [-5.4779, -7.0608, -1.7382]);
        assert_eq!(cfg.bounds.u_max, [0.06, 0.06, 0.6]);
        assert_eq!(cfg.pd.kp, [0.05, 0.05, 1.7, 1.0]);
        assert_eq!(cfg.pd.kd, [0.065, 0.065, 0.2, 0.8]);
        assert_eq!(cfg.mpc.horizon, 10);
        assert_eq!(cfg.timing.control_dt, 0.2);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = AppConfig::default();
        let text = cfg.to_toml();
        let back = AppConfig::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = AppConfig::from_str("[mpc]\nhorizon = 5\nqx = [1,1,1,1,1,1]\nqu = [1,1,1]\nqr = [1,1,1]\nqfx = [0,0,0,0,0,0]\nqfu = [0,0,0]\nomega_cap = 50\n").unwrap();
        assert_eq!(cfg.mpc.horizon, 5);
        assert_eq!(cfg.model.alpha, [0.0527, 0.0187, 1.7873]);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = AppConfig::from_str("[sim]\nnoise_sigma = 0.0\ndelay_steps = 0\nseed = 1\nduration = 5.0\nbogus = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn scenario_selection() {
        let mut cfg = AppConfig::default();
        assert!(matches!(cfg.scenario().unwrap(), Scenario::Lemniscate { .. }));
        cfg.scenario.kind = "waypoints".into();
        assert!(cfg.scenario().is_err());
        cfg.scenario.waypoints = vec![[0.0, 0.5, 0.0, 1.0]];
        assert!(matches!(cfg.scenario().unwrap(), Scenario::Waypoints(_)));
        cfg.scenario.kind = "spiral".into();
        assert!(cfg.scenario().is_err());
    }

    #[test]
    fn sim_config_validates_timing() {
        let mut cfg = AppConfig::default();
        cfg.timing.control_dt = 0.013;
        assert!(cfg.sim_config().is_err());
    }
}
