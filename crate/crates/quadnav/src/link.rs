//! UDP pose/command link: fixed 48-byte little-endian packets, a paced
//! plant server, and the controller side that flies over the link.
//!
//! Both packet types are 48 bytes so either end can size its buffers
//! identically: `seq: u64, t: f64` followed by four `f64` payload words
//! (position + yaw for poses, the four input channels for commands).

use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ident::saturate;
use crate::mpc::{mpc_step, InputBounds, MpcSetup, MpcWarm};
use crate::sim::{measure, plant_blocks, plant_step, PlantState, Scenario, SimConfig};
use crate::{Error, Result};

/// Wire size of both packet types.
pub const PACKET_LEN: usize = 48;

/// Pose sample sent by the plant side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePacket {
    pub seq: u64,
    pub t: f64,
    pub pos: [f64; 3],
    pub yaw: f64,
}

/// Input command sent by the controller side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandPacket {
    pub seq: u64,
    pub t: f64,
    pub u: [f64; 4],
}

fn put_f64(buf: &mut [u8], off: usize, v: f64) {
    buf[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

fn get_f64(buf: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(buf[off..off + 8].try_into().expect("8 bytes"))
}

impl PosePacket {
    pub fn encode(&self) -> [u8; PACKET_LEN] {
        let mut b = [0u8; PACKET_LEN];
        b[0..8].copy_from_slice(&self.seq.to_le_bytes());
        put_f64(&mut b, 8, self.t);
        for i in 0..3 {
            put_f64(&mut b, 16 + 8 * i, self.pos[i]);
        }
        put_f64(&mut b, 40, self.yaw);
        b
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() != PACKET_LEN {
            return Err(Error::MalformedPacket(format!(
                "pose packet length {} != {PACKET_LEN}",
                buf.len()
            )));
        }
        let p = Self {
            seq: u64::from_le_bytes(buf[0..8].try_into().expect("8 bytes")),
            t: get_f64(buf, 8),
            pos: [get_f64(buf, 16), get_f64(buf, 24), get_f64(buf, 32)],
            yaw: get_f64(buf, 40),
        };
        if !p.t.is_finite() || p.pos.iter().any(|v| !v.is_finite()) || !p.yaw.is_finite() {
            return Err(Error::MalformedPacket("non-finite pose field".into()));
        }
        Ok(p)
    }
}

impl CommandPacket {
    pub fn encode(&self) -> [u8; PACKET_LEN] {
        let mut b = [0u8; PACKET_LEN];
        b[0..8].copy_from_slice(&self.seq.to_le_bytes());
        put_f64(&mut b, 8, self.t);
        for i in 0..4 {
            put_f64(&mut b, 16 + 8 * i, self.u[i]);
        }
        b
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() != PACKET_LEN {
            return Err(Error::MalformedPacket(format!(
                "command packet length {} != {PACKET_LEN}",
                buf.len()
            )));
        }
        let c = Self {
            seq: u64::from_le_bytes(buf[0..8].try_into().expect("8 bytes")),
            t: get_f64(buf, 8),
            u: [
                get_f64(buf, 16),
                get_f64(buf, 24),
                get_f64(buf, 32),
                get_f64(buf, 40),
            ],
        };
        if !c.t.is_finite() || c.u.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedPacket("non-finite command field".into()));
        }
        Ok(c)
    }
}

/// Counters reported by either end of the link.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinkStats {
    pub sent: u64,
    pub received: u64,
    pub stale_dropped: u64,
    pub malformed: u64,
}

/// Plant-side result: the true trajectory plus link counters.
#[derive(Debug, Clone)]
pub struct PlantRunReport {
    pub stats: LinkStats,
    /// `(t, true position, applied input)` at every sensor tick.
    pub trajectory: Vec<(f64, [f64; 3], [f64; 4])>,
    pub final_state: PlantState,
}

/// Serve the simulated plant over UDP: send one pose per sensor tick,
/// last-value-hold the newest in-order command, and pace wall time by
/// `time_scale` (a scale of 10 runs ten times faster than real time).
///
/// With `lockstep = Some((ratio, timeout))` the plant additionally waits up
/// to `timeout` for a fresh command after each pose whose sequence number
/// is a multiple of `ratio`, so the controller's reply lands on the very
/// tick it was computed for — deterministic parity with an offline run.
pub fn serve_plant(
    config: &SimConfig,
    bind: SocketAddr,
    peer: SocketAddr,
    time_scale: f64,
    lockstep: Option<(usize, Duration)>,
) -> Result<PlantRunReport> {
    config.validate()?;
    if !(time_scale > 0.0) {
        return Err(Error::InvalidParameter("time_scale must be positive".into()));
    }
    let socket = UdpSocket::bind(bind)?;
    socket.set_nonblocking(true)?;

    let blocks = plant_blocks(&config.model, config.sensor_dt)?;
    let n_steps = (config.duration / config.sensor_dt).round() as usize;
    let tick = Duration::from_secs_f64(config.sensor_dt / time_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = PlantState::default();
    let mut stats = LinkStats::default();
    let mut applied = [0.0f64; 4];
    let mut last_cmd_seq: Option<u64> = None;
    let mut trajectory = Vec::with_capacity(n_steps);
    let mut buf = [0u8; 64];
    let start = Instant::now();

    for k in 0..n_steps {
        let t = k as f64 * config.sensor_dt;
        let meas = measure(&state, config.noise_sigma, &mut rng);
        let pose = PosePacket {
            seq: k as u64,
            t,
            pos: [meas[0], meas[1], meas[2]],
            yaw: state.yaw,
        };
        socket.send_to(&pose.encode(), peer)?;
        stats.sent += 1;

        // Drain pending commands; keep the newest in-order one.
        fn drain(
            socket: &UdpSocket,
            buf: &mut [u8; 64],
            stats: &mut LinkStats,
            last_cmd_seq: &mut Option<u64>,
            applied: &mut [f64; 4],
            bounds: &InputBounds,
        ) -> Result<bool> {
            let mut fresh = false;
            loop {
                match socket.recv_from(buf) {
                    Ok((len, _)) => match CommandPacket::decode(&buf[..len]) {
                        Ok(cmd) => {
                            stats.received += 1;
                            if last_cmd_seq.is_some_and(|s| cmd.seq <= s) {
                                stats.stale_dropped += 1;
                            } else {
                                *last_cmd_seq = Some(cmd.seq);
                                *applied = saturate(cmd.u, bounds);
                                fresh = true;
                            }
                        }
                        Err(_) => stats.malformed += 1,
                    },
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => return Ok(fresh),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let mut fresh = drain(
            &socket,
            &mut buf,
            &mut stats,
            &mut last_cmd_seq,
            &mut applied,
            &config.bounds,
        )?;
        if let Some((ratio, timeout)) = lockstep {
            if k % ratio == 0 {
                let wait_until = Instant::now() + timeout;
                let mut next_resend = Instant::now() + Duration::from_millis(20);
                while !fresh && Instant::now() < wait_until {
                    std::thread::sleep(Duration::from_micros(100));
                    // Re-send the pose in case the peer was not yet bound
                    // when the first copy went out.
                    if Instant::now() >= next_resend {
                        socket.send_to(&pose.encode(), peer)?;
                        next_resend += Duration::from_millis(20);
                    }
                    fresh = drain(
                        &socket,
                        &mut buf,
                        &mut stats,
                        &mut last_cmd_seq,
                        &mut applied,
                        &config.bounds,
                    )?;
                }
            }
        }

        trajectory.push((t, [state.pos[0], state.pos[1], state.pos[2]], applied));
        state = plant_step(&blocks, &state, applied, config.sensor_dt);

        let deadline = start + tick * (k as u32 + 1);
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }

    Ok(PlantRunReport {
        stats,
        trajectory,
        final_state: state,
    })
}

/// Controller-side result of a flight over the link.
#[derive(Debug, Clone)]
pub struct FlyReport {
    pub stats: LinkStats,
    /// `(t, measured position)` at every accepted pose.
    pub poses: Vec<(f64, [f64; 3])>,
    /// `(t, theta*)` per MPC solve.
    pub thetas: Vec<(f64, [f64; 3])>,
}

/// Fly over UDP: accept poses in sequence order, estimate velocity by
/// differencing adjacent poses, and run one MPC step every
/// pose whose sequence number is a multiple of `control_ratio`, replying
/// with the command. Returns
/// when a pose with `t >= duration` arrives or the link stays silent for
/// `idle_timeout`.
pub fn fly(
    setup: &MpcSetup,
    scenario: &Scenario,
    bind: SocketAddr,
    peer: SocketAddr,
    control_ratio: usize,
    sensor_dt: f64,
    duration: f64,
    idle_timeout: Duration,
) -> Result<FlyReport> {
    if control_ratio == 0 {
        return Err(Error::InvalidParameter("control_ratio must be >= 1".into()));
    }
    let socket = UdpSocket::bind(bind)?;
    socket.set_read_timeout(Some(idle_timeout))?;

    let mut stats = LinkStats::default();
    let mut warm = MpcWarm::new();
    let mut last_pose_seq: Option<u64> = None;
    let mut prev_pos: Option<Vector3<f64>> = None;
    let mut cmd_seq: u64 = 0;
    let mut poses = Vec::new();
    let mut thetas = Vec::new();
    let mut buf = [0u8; 64];

    loop {
        let (len, _) = match socket.recv_from(&mut buf) {
            Ok(v) => v,
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let pose = match PosePacket::decode(&buf[..len]) {
            Ok(p) => p,
            Err(_) => {
                stats.malformed += 1;
                continue;
            }
        };
        stats.received += 1;
        if last_pose_seq.is_some_and(|s| pose.seq <= s) {
            stats.stale_dropped += 1;
            continue;
        }
        // Span since the previous accepted pose; dropped poses widen it.
        let gap = last_pose_seq.map_or(1, |s| pose.seq - s);
        last_pose_seq = Some(pose.seq);

        let pos = Vector3::new(pose.pos[0], pose.pos[1], pose.pos[2]);
        let vel = match prev_pos {
            Some(p) => (pos - p) / (gap as f64 * sensor_dt),
            None => Vector3::zeros(),
        };
        prev_pos = Some(pos);
        poses.push((pose.t, pose.pos));

        // Keyed to the plant's sequence counter so a dropped pose shifts
        // rather than skews the control phase.
        if pose.seq % control_ratio as u64 == 0 {
            let desired = scenario.reference_at(pose.t)?;
            let x = nalgebra::Vector6::new(pos[0], vel[0], pos[1], vel[1], pos[2], vel[2]);
            let (u, theta, _) = mpc_step(setup, &x, &desired.pos, &mut warm)?;
            let cmd = CommandPacket {
                seq: cmd_seq,
                t: pose.t,
                u: [u[0], u[1], u[2], 0.0],
            };
            socket.send_to(&cmd.encode(), peer)?;
            stats.sent += 1;
            cmd_seq += 1;
            thetas.push((pose.t, [theta[0], theta[1], theta[2]]));
        }
        if pose.t + sensor_dt >= duration {
            break;
        }
    }

    Ok(FlyReport {
        stats,
        poses,
        thetas,
    })
}
