//! Protocol messages and their wire encoding.
//!
//! A frame on the wire is `[u32 BE length][u16 version][u16 msg_type][payload]`
//! where `length` counts everything after itself. The payload is a sequence
//! of self-describing fields `[u16 tag][u8 kind][value]`; numbers are
//! little-endian and floats keep their exact IEEE-754 bits. Unknown tags are
//! skipped so newer senders stay readable.

use dabd_core::body::{BodyId, Dof, Mat6, Vec2};
use dabd_core::consensus::Plane;

use crate::error::{Result, RuntimeError};

pub const WIRE_VERSION: u16 = 1;

/// Refuse frames larger than this many bytes.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    pub id: BodyId,
    pub q: Dof,
    pub q_dot: Dof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStart {
    pub frame: u64,
    pub attempt: u32,
    pub h: f64,
    pub w: f64,
    pub planes: Vec<Plane>,
    /// Holder mask for every body in the scene.
    pub holders: Vec<u64>,
    /// Dynamic bodies held by the receiving worker.
    pub states: Vec<BodyState>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FetchSharedRequest {
    pub frame: u64,
    pub attempt: u32,
    pub from: u32,
    pub to: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FetchedBody {
    pub id: BodyId,
    pub mass_matrix: Mat6,
    pub mesh: u32,
    pub q: Dof,
    pub q_dot: Dof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchSharedReply {
    pub frame: u64,
    pub attempt: u32,
    pub from: u32,
    pub bodies: Vec<FetchedBody>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharedEntry {
    pub id: BodyId,
    pub q: Dof,
    pub rho: f64,
    pub u: Dof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterShared {
    pub frame: u64,
    pub attempt: u32,
    pub k: u32,
    pub from: u32,
    pub bodies: Vec<SharedEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterationReport {
    pub frame: u64,
    pub attempt: u32,
    pub k: u32,
    pub worker: u32,
    pub dq_inf: f64,
    pub r_inf: f64,
    pub s_inf: f64,
    pub toi: f64,
    pub newton_iterations: u32,
    /// Newton iterations times held dynamic bodies for the last local solve.
    pub work: f64,
    pub contacts: u32,
    pub candidates: u32,
    pub t_solve: f64,
    pub t_coll: f64,
    pub t_sync: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Signal {
    Continue,
    End,
    AbortRetry { h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSignal {
    pub frame: u64,
    pub attempt: u32,
    pub k: u32,
    pub signal: Signal,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorkerStats {
    pub solves: u32,
    pub newton_iterations: u32,
    pub work: f64,
    pub bodies: u32,
    pub t_solve: f64,
    pub t_coll: f64,
    pub t_sync: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameCommit {
    pub frame: u64,
    pub attempt: u32,
    pub worker: u32,
    pub states: Vec<BodyState>,
    pub stats: WorkerStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceUpdate {
    pub frame: u64,
    pub interface: u32,
    pub dp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    FrameStart(FrameStart),
    FetchSharedRequest(FetchSharedRequest),
    FetchSharedReply(FetchSharedReply),
    IterShared(IterShared),
    IterationReport(IterationReport),
    ControlSignal(ControlSignal),
    FrameCommit(FrameCommit),
    BalanceUpdate(BalanceUpdate),
    Shutdown { reason: String },
    Hello { worker: u32, listen: String },
    Directory { addrs: Vec<String> },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::FrameStart(_) => "FrameStart",
            Message::FetchSharedRequest(_) => "FetchSharedRequest",
            Message::FetchSharedReply(_) => "FetchSharedReply",
            Message::IterShared(_) => "IterShared",
            Message::IterationReport(_) => "IterationReport",
            Message::ControlSignal(_) => "ControlSignal",
            Message::FrameCommit(_) => "FrameCommit",
            Message::BalanceUpdate(_) => "BalanceUpdate",
            Message::Shutdown { .. } => "Shutdown",
            Message::Hello { .. } => "Hello",
            Message::Directory { .. } => "Directory",
        }
    }

    fn type_code(&self) -> u16 {
        match self {
            Message::FrameStart(_) => 1,
            Message::FetchSharedRequest(_) => 2,
            Message::FetchSharedReply(_) => 3,
            Message::IterShared(_) => 4,
            Message::IterationReport(_) => 5,
            Message::ControlSignal(_) => 6,
            Message::FrameCommit(_) => 7,
            Message::BalanceUpdate(_) => 8,
            Message::Shutdown { .. } => 9,
            Message::Hello { .. } => 10,
            Message::Directory { .. } => 11,
        }
    }
}

const K_U64: u8 = 0;
const K_F64: u8 = 1;
const K_F64S: u8 = 2;
const K_U64S: u8 = 3;
const K_STR: u8 = 4;
const K_RECORDS: u8 = 5;

#[derive(Default)]
struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn head(&mut self, tag: u16, kind: u8) {
        self.buf.extend_from_slice(&tag.to_le_bytes());
        self.buf.push(kind);
    }

    fn u64(&mut self, tag: u16, v: u64) -> &mut Self {
        self.head(tag, K_U64);
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn f64(&mut self, tag: u16, v: f64) -> &mut Self {
        self.head(tag, K_F64);
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn f64s(&mut self, tag: u16, vs: &[f64]) -> &mut Self {
        self.head(tag, K_F64S);
        self.buf.extend_from_slice(&(vs.len() as u32).to_le_bytes());
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    fn u64s(&mut self, tag: u16, vs: &[u64]) -> &mut Self {
        self.head(tag, K_U64S);
        self.buf.extend_from_slice(&(vs.len() as u32).to_le_bytes());
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    fn str(&mut self, tag: u16, s: &str) -> &mut Self {
        self.head(tag, K_STR);
        self.buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    fn records<T>(&mut self, tag: u16, items: &[T], f: impl Fn(&mut Enc, &T)) -> &mut Self {
        self.head(tag, K_RECORDS);
        self.buf
            .extend_from_slice(&(items.len() as u32).to_le_bytes());
        for it in items {
            let mut inner = Enc::default();
            f(&mut inner, it);
            self.buf
                .extend_from_slice(&(inner.buf.len() as u32).to_le_bytes());
            self.buf.extend_from_slice(&inner.buf);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    U64(u64),
    F64(f64),
    F64s(Vec<f64>),
    U64s(Vec<u64>),
    Str(String),
    Records(Vec<Fields>),
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Fields(Vec<(u16, Value)>);

fn codec_err(msg: impl Into<String>) -> RuntimeError {
    RuntimeError::Codec(msg.into())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| codec_err("truncated payload"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_fields(data: &[u8]) -> Result<Fields> {
    let mut c = Cursor { data, pos: 0 };
    let mut out = Vec::new();
    while c.pos < data.len() {
        let tag = c.u16()?;
        let kind = c.u8()?;
        let v = match kind {
            K_U64 => Value::U64(c.u64()?),
            K_F64 => Value::F64(c.f64()?),
            K_F64S => {
                let n = c.u32()? as usize;
                if n > data.len() / 8 {
                    return Err(codec_err("array length exceeds payload"));
                }
                Value::F64s((0..n).map(|_| c.f64()).collect::<Result<_>>()?)
            }
            K_U64S => {
                let n = c.u32()? as usize;
                if n > data.len() / 8 {
                    return Err(codec_err("array length exceeds payload"));
                }
                Value::U64s((0..n).map(|_| c.u64()).collect::<Result<_>>()?)
            }
            K_STR => {
                let n = c.u32()? as usize;
                let bytes = c.take(n)?;
                Value::Str(
                    String::from_utf8(bytes.to_vec()).map_err(|_| codec_err("invalid utf-8"))?,
                )
            }
            K_RECORDS => {
                let n = c.u32()? as usize;
                if n > data.len() / 4 {
                    return Err(codec_err("record count exceeds payload"));
                }
                let mut recs = Vec::with_capacity(n);
                for _ in 0..n {
                    let len = c.u32()? as usize;
                    recs.push(parse_fields(c.take(len)?)?);
                }
                Value::Records(recs)
            }
            k => return Err(codec_err(format!("unknown field kind {k}"))),
        };
        out.push((tag, v));
    }
    Ok(Fields(out))
}

impl Fields {
    fn get(&self, tag: u16) -> Result<&Value> {
        self.0
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, v)| v)
            .ok_or_else(|| codec_err(format!("missing field {tag}")))
    }

    fn u64(&self, tag: u16) -> Result<u64> {
        match self.get(tag)? {
            Value::U64(v) => Ok(*v),
            _ => Err(codec_err(format!("field {tag} is not an integer"))),
        }
    }

    fn u32(&self, tag: u16) -> Result<u32> {
        u32::try_from(self.u64(tag)?).map_err(|_| codec_err(format!("field {tag} out of range")))
    }

    fn f64(&self, tag: u16) -> Result<f64> {
        match self.get(tag)? {
            Value::F64(v) => Ok(*v),
            _ => Err(codec_err(format!("field {tag} is not a float"))),
        }
    }

    fn f64s(&self, tag: u16) -> Result<&[f64]> {
        match self.get(tag)? {
            Value::F64s(v) => Ok(v),
            _ => Err(codec_err(format!("field {tag} is not a float array"))),
        }
    }

    fn u64s(&self, tag: u16) -> Result<&[u64]> {
        match self.get(tag)? {
            Value::U64s(v) => Ok(v),
            _ => Err(codec_err(format!("field {tag} is not an integer array"))),
        }
    }

    fn str(&self, tag: u16) -> Result<&str> {
        match self.get(tag)? {
            Value::Str(v) => Ok(v),
            _ => Err(codec_err(format!("field {tag} is not a string"))),
        }
    }

    fn records(&self, tag: u16) -> Result<&[Fields]> {
        match self.get(tag)? {
            Value::Records(v) => Ok(v),
            _ => Err(codec_err(format!("field {tag} is not a record list"))),
        }
    }

    fn dof(&self, tag: u16) -> Result<Dof> {
        let v = self.f64s(tag)?;
        if v.len() != 6 {
            return Err(codec_err(format!("field {tag} must hold 6 values")));
        }
        Ok(Dof::from_column_slice(v))
    }

    fn id(&self, tag: u16) -> Result<BodyId> {
        Ok(BodyId(self.u32(tag)?))
    }
}

// Field tags, shared across message types.
const T_FRAME: u16 = 1;
const T_ATTEMPT: u16 = 2;
const T_K: u16 = 3;
const T_WORKER: u16 = 4;
const T_FROM: u16 = 5;
const T_TO: u16 = 6;
const T_H: u16 = 7;
const T_W: u16 = 8;
const T_PLANES: u16 = 9;
const T_HOLDERS: u16 = 10;
const T_STATES: u16 = 11;
const T_BODIES: u16 = 12;
const T_ID: u16 = 13;
const T_Q: u16 = 14;
const T_QDOT: u16 = 15;
const T_MASS: u16 = 16;
const T_MESH: u16 = 17;
const T_RHO: u16 = 18;
const T_U: u16 = 19;
const T_DQ: u16 = 20;
const T_R: u16 = 21;
const T_S: u16 = 22;
const T_TOI: u16 = 23;
const T_NEWTON: u16 = 24;
const T_WORK: u16 = 25;
const T_CONTACTS: u16 = 26;
const T_CANDIDATES: u16 = 27;
const T_TSOLVE: u16 = 28;
const T_TCOLL: u16 = 29;
const T_TSYNC: u16 = 30;
const T_SIGNAL: u16 = 31;
const T_SOLVES: u16 = 32;
const T_NBODIES: u16 = 33;
const T_INTERFACE: u16 = 34;
const T_DP: u16 = 35;
const T_REASON: u16 = 36;
const T_LISTEN: u16 = 37;
const T_ADDRS: u16 = 38;
const T_ADDR: u16 = 39;

fn enc_state(e: &mut Enc, s: &BodyState) {
    e.u64(T_ID, s.id.0 as u64)
        .f64s(T_Q, s.q.as_slice())
        .f64s(T_QDOT, s.q_dot.as_slice());
}

fn dec_state(f: &Fields) -> Result<BodyState> {
    Ok(BodyState {
        id: f.id(T_ID)?,
        q: f.dof(T_Q)?,
        q_dot: f.dof(T_QDOT)?,
    })
}

fn enc_stats(e: &mut Enc, s: &WorkerStats) {
    e.u64(T_SOLVES, s.solves as u64)
        .u64(T_NEWTON, s.newton_iterations as u64)
        .f64(T_WORK, s.work)
        .u64(T_NBODIES, s.bodies as u64)
        .f64(T_TSOLVE, s.t_solve)
        .f64(T_TCOLL, s.t_coll)
        .f64(T_TSYNC, s.t_sync);
}

fn dec_stats(f: &Fields) -> Result<WorkerStats> {
    Ok(WorkerStats {
        solves: f.u32(T_SOLVES)?,
        newton_iterations: f.u32(T_NEWTON)?,
        work: f.f64(T_WORK)?,
        bodies: f.u32(T_NBODIES)?,
        t_solve: f.f64(T_TSOLVE)?,
        t_coll: f.f64(T_TCOLL)?,
        t_sync: f.f64(T_TSYNC)?,
    })
}

fn encode_payload(m: &Message) -> Vec<u8> {
    let mut e = Enc::default();
    match m {
        Message::FrameStart(f) => {
            let planes: Vec<f64> = f
                .planes
                .iter()
                .flat_map(|p| [p.point.x, p.point.y, p.normal.x, p.normal.y])
                .collect();
            e.u64(T_FRAME, f.frame)
                .u64(T_ATTEMPT, f.attempt as u64)
                .f64(T_H, f.h)
                .f64(T_W, f.w)
                .f64s(T_PLANES, &planes)
                .u64s(T_HOLDERS, &f.holders)
                .records(T_STATES, &f.states, enc_state);
        }
        Message::FetchSharedRequest(r) => {
            e.u64(T_FRAME, r.frame)
                .u64(T_ATTEMPT, r.attempt as u64)
                .u64(T_FROM, r.from as u64)
                .u64(T_TO, r.to as u64);
        }
        Message::FetchSharedReply(r) => {
            e.u64(T_FRAME, r.frame)
                .u64(T_ATTEMPT, r.attempt as u64)
                .u64(T_FROM, r.from as u64)
                .records(T_BODIES, &r.bodies, |e, b| {
                    e.u64(T_ID, b.id.0 as u64)
                        .f64s(T_MASS, b.mass_matrix.as_slice())
                        .u64(T_MESH, b.mesh as u64)
                        .f64s(T_Q, b.q.as_slice())
                        .f64s(T_QDOT, b.q_dot.as_slice());
                });
        }
        Message::IterShared(s) => {
            e.u64(T_FRAME, s.frame)
                .u64(T_ATTEMPT, s.attempt as u64)
                .u64(T_K, s.k as u64)
                .u64(T_FROM, s.from as u64)
                .records(T_BODIES, &s.bodies, |e, b| {
                    e.u64(T_ID, b.id.0 as u64)
                        .f64s(T_Q, b.q.as_slice())
                        .f64(T_RHO, b.rho)
                        .f64s(T_U, b.u.as_slice());
                });
        }
        Message::IterationReport(r) => {
            e.u64(T_FRAME, r.frame)
                .u64(T_ATTEMPT, r.attempt as u64)
                .u64(T_K, r.k as u64)
                .u64(T_WORKER, r.worker as u64)
                .f64(T_DQ, r.dq_inf)
                .f64(T_R, r.r_inf)
                .f64(T_S, r.s_inf)
                .f64(T_TOI, r.toi)
                .u64(T_NEWTON, r.newton_iterations as u64)
                .f64(T_WORK, r.work)
                .u64(T_CONTACTS, r.contacts as u64)
                .u64(T_CANDIDATES, r.candidates as u64)
                .f64(T_TSOLVE, r.t_solve)
                .f64(T_TCOLL, r.t_coll)
                .f64(T_TSYNC, r.t_sync);
        }
        Message::ControlSignal(c) => {
            e.u64(T_FRAME, c.frame)
                .u64(T_ATTEMPT, c.attempt as u64)
                .u64(T_K, c.k as u64);
            match c.signal {
                Signal::Continue => e.u64(T_SIGNAL, 0),
                Signal::End => e.u64(T_SIGNAL, 1),
                Signal::AbortRetry { h } => e.u64(T_SIGNAL, 2).f64(T_H, h),
            };
        }
        Message::FrameCommit(c) => {
            e.u64(T_FRAME, c.frame)
                .u64(T_ATTEMPT, c.attempt as u64)
                .u64(T_WORKER, c.worker as u64)
                .records(T_STATES, &c.states, enc_state);
            enc_stats(&mut e, &c.stats);
        }
        Message::BalanceUpdate(b) => {
            e.u64(T_FRAME, b.frame)
                .u64(T_INTERFACE, b.interface as u64)
                .f64(T_DP, b.dp);
        }
        Message::Shutdown { reason } => {
            e.str(T_REASON, reason);
        }
        Message::Hello { worker, listen } => {
            e.u64(T_WORKER, *worker as u64).str(T_LISTEN, listen);
        }
        Message::Directory { addrs } => {
            e.records(T_ADDRS, addrs, |e, a| {
                e.str(T_ADDR, a);
            });
        }
    }
    e.buf
}

fn decode_payload(code: u16, f: &Fields) -> Result<Message> {
    Ok(match code {
        1 => {
            let raw = f.f64s(T_PLANES)?;
            if raw.len() % 4 != 0 {
                return Err(codec_err("plane array length must be a multiple of 4"));
            }
            let planes = raw
                .chunks(4)
                .map(|c| Plane {
                    point: Vec2::new(c[0], c[1]),
                    normal: Vec2::new(c[2], c[3]),
                })
                .collect();
            Message::FrameStart(FrameStart {
                frame: f.u64(T_FRAME)?,
                attempt: f.u32(T_ATTEMPT)?,
                h: f.f64(T_H)?,
                w: f.f64(T_W)?,
                planes,
                holders: f.u64s(T_HOLDERS)?.to_vec(),
                states: f
                    .records(T_STATES)?
                    .iter()
                    .map(dec_state)
                    .collect::<Result<_>>()?,
            })
        }
        2 => Message::FetchSharedRequest(FetchSharedRequest {
            frame: f.u64(T_FRAME)?,
            attempt: f.u32(T_ATTEMPT)?,
            from: f.u32(T_FROM)?,
            to: f.u32(T_TO)?,
        }),
        3 => Message::FetchSharedReply(FetchSharedReply {
            frame: f.u64(T_FRAME)?,
            attempt: f.u32(T_ATTEMPT)?,
            from: f.u32(T_FROM)?,
            bodies: f
                .records(T_BODIES)?
                .iter()
                .map(|r| {
                    let m = r.f64s(T_MASS)?;
                    if m.len() != 36 {
                        return Err(codec_err("mass matrix must hold 36 values"));
                    }
                    Ok(FetchedBody {
                        id: r.id(T_ID)?,
                        mass_matrix: Mat6::from_column_slice(m),
                        mesh: r.u32(T_MESH)?,
                        q: r.dof(T_Q)?,
                        q_dot: r.dof(T_QDOT)?,
                    })
                })
                .collect::<Result<_>>()?,
        }),
        4 => Message::IterShared(IterShared {
            frame: f.u64(T_FRAME)?,
            attempt: f.u32(T_ATTEMPT)?,
            k: f.u32(T_K)?,
            from: f.u32(T_FROM)?,
            bodies: f
                .records(T_BODIES)?
                .iter()
                .map(|r| {
                    Ok(SharedEntry {
                        id: r.id(T_ID)?,
                        q: r.dof(T_Q)?,
                        rho: r.f64(T_RHO)?,
                        u: r.dof(T_U)?,
                    })
                })
                .collect::<Result<_>>()?,
        }),
        5 => Message::IterationReport(IterationReport {
            frame: f.u64(T_FRAME)?,
            attempt: f.u32(T_ATTEMPT)?,
            k: f.u32(T_K)?,
            worker: f.u32(T_WORKER)?,
            dq_inf: f.f64(T_DQ)?,
            r_inf: f.f64(T_R)?,
            s_inf: f.f64(T_S)?,
            toi: f.f64(T_TOI)?,
            newton_iterations: f.u32(T_NEWTON)?,
            work: f.f64(T_WORK)?,
            contacts: f.u32(T_CONTACTS)?,
            candidates: f.u32(T_CANDIDATES)?,
            t_solve: f.f64(T_TSOLVE)?,
            t_coll: f.f64(T_TCOLL)?,
            t_sync: f.f64(T_TSYNC)?,
        }),
        6 => Message::ControlSignal(ControlSignal {
            frame: f.u64(T_FRAME)?,
            attempt: f.u32(T_ATTEMPT)?,
            k: f.u32(T_K)?,
            signal: match f.u64(T_SIGNAL)? {
                0 => Signal::Continue,
                1 => Signal::End,
                2 => Signal::AbortRetry { h: f.f64(T_H)? },
                s => return Err(codec_err(format!("unknown signal {s}"))),
            },
        }),
        7 => Message::FrameCommit(FrameCommit {
            frame: f.u64(T_FRAME)?,
            attempt: f.u32(T_ATTEMPT)?,
            worker: f.u32(T_WORKER)?,
            states: f
                .records(T_STATES)?
                .iter()
                .map(dec_state)
                .collect::<Result<_>>()?,
            stats: dec_stats(f)?,
        }),
        8 => Message::BalanceUpdate(BalanceUpdate {
            frame: f.u64(T_FRAME)?,
            interface: f.u32(T_INTERFACE)?,
            dp: f.f64(T_DP)?,
        }),
        9 => Message::Shutdown {
            reason: f.str(T_REASON)?.to_string(),
        },
        10 => Message::Hello {
            worker: f.u32(T_WORKER)?,
            listen: f.str(T_LISTEN)?.to_string(),
        },
        11 => Message::Directory {
            addrs: f
                .records(T_ADDRS)?
                .iter()
                .map(|r| r.str(T_ADDR).map(str::to_string))
                .collect::<Result<_>>()?,
        },
        c => return Err(codec_err(format!("unknown message type {c}"))),
    })
}

/// Full wire frame including the length prefix.
pub fn encode(m: &Message) -> Vec<u8> {
    let payload = encode_payload(m);
    let len = (payload.len() + 4) as u32;
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&WIRE_VERSION.to_be_bytes());
    out.extend_from_slice(&m.type_code().to_be_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decodes the bytes following the length prefix.
pub fn decode_body(body: &[u8]) -> Result<Message> {
    if body.len() < 4 {
        return Err(codec_err("frame shorter than its header"));
    }
    let version = u16::from_be_bytes([body[0], body[1]]);
    if version != WIRE_VERSION {
        return Err(codec_err(format!("unsupported wire version {version}")));
    }
    let code = u16::from_be_bytes([body[2], body[3]]);
    decode_payload(code, &parse_fields(&body[4..])?)
}

/// Decodes one complete frame, length prefix included.
pub fn decode(frame: &[u8]) -> Result<Message> {
    if frame.len() < 4 {
        return Err(codec_err("missing length prefix"));
    }
    let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
    if frame.len() - 4 != len {
        return Err(codec_err(format!(
            "length prefix {len} does not match {} bytes",
            frame.len() - 4
        )));
    }
    decode_body(&frame[4..])
}

/// Blocking read of one frame from a stream.
pub fn read_message(r: &mut impl std::io::Read) -> Result<Message> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(codec_err(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_body(&body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dof(seed: f64) -> Dof {
        Dof::from_fn(|i, _| seed * (i as f64 + 1.0).sqrt() - 0.1)
    }

    fn samples() -> Vec<Message> {
        vec![
            Message::FrameStart(FrameStart {
                frame: 7,
                attempt: 1,
                h: 0.01,
                w: 0.3,
                planes: vec![Plane::vertical(0.25)],
                holders: vec![1, 3, 2],
                states: vec![BodyState {
                    id: BodyId(4),
                    q: dof(0.3),
                    q_dot: dof(-1.7),
                }],
            }),
            Message::FetchSharedRequest(FetchSharedRequest {
                frame: 1,
                attempt: 0,
                from: 0,
                to: 1,
            }),
            Message::FetchSharedReply(FetchSharedReply {
                frame: 1,
                attempt: 0,
                from: 1,
                bodies: vec![FetchedBody {
                    id: BodyId(2),
                    mass_matrix: Mat6::from_fn(|i, j| (i * 6 + j) as f64 / 7.0),
                    mesh: 2,
                    q: dof(1.1),
                    q_dot: dof(f64::MIN_POSITIVE),
                }],
            }),
            Message::IterShared(IterShared {
                frame: 3,
                attempt: 2,
                k: 9,
                from: 0,
                bodies: vec![SharedEntry {
                    id: BodyId(1),
                    q: dof(0.2),
                    rho: 12.5,
                    u: dof(-3e-17),
                }],
            }),
            Message::IterationReport(IterationReport {
                frame: 3,
                k: 9,
                worker: 1,
                dq_inf: 1e-300,
                toi: 1.0,
                ..Default::default()
            }),
            Message::ControlSignal(ControlSignal {
                frame: 3,
                attempt: 0,
                k: 9,
                signal: Signal::AbortRetry { h: 0.005 },
            }),
            Message::ControlSignal(ControlSignal {
                frame: 3,
                attempt: 0,
                k: 9,
                signal: Signal::End,
            }),
            Message::FrameCommit(FrameCommit {
                frame: 3,
                attempt: 0,
                worker: 1,
                states: vec![],
                stats: WorkerStats {
                    solves: 4,
                    newton_iterations: 9,
                    work: 81.0,
                    bodies: 9,
                    ..Default::default()
                },
            }),
            Message::BalanceUpdate(BalanceUpdate {
                frame: 5,
                interface: 0,
                dp: -0.01,
            }),
            Message::Shutdown {
                reason: "done".into(),
            },
            Message::Hello {
                worker: 3,
                listen: "127.0.0.1:4000".into(),
            },
            Message::Directory {
                addrs: vec!["a:1".into(), "b:2".into()],
            },
        ]
    }

    #[test]
    fn every_message_round_trips() {
        for m in samples() {
            let bytes = encode(&m);
            assert_eq!(decode(&bytes).unwrap(), m, "{}", m.kind());
            assert_eq!(u16::from_be_bytes([bytes[4], bytes[5]]), WIRE_VERSION);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Message::Shutdown {
            reason: String::new(),
        });
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        assert_eq!(u16::from_be_bytes([bytes[6], bytes[7]]), 9);
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = encode(&Message::Shutdown { reason: "x".into() });
        bytes[5] = 9;
        assert!(decode(&bytes).is_err());
        let bytes = encode(&Message::Shutdown { reason: "x".into() });
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&[0, 0, 0, 4, 0, 1, 0, 99]).is_err());
    }

    #[test]
    fn unknown_fields_are_skipped() {
        let mut bytes = encode(&Message::BalanceUpdate(BalanceUpdate {
            frame: 1,
            interface: 0,
            dp: 0.5,
        }));
        let mut extra = Enc::default();
        extra.f64(999, 1.0);
        bytes.extend_from_slice(&extra.buf);
        let len = (bytes.len() - 4) as u32;
        bytes[..4].copy_from_slice(&len.to_be_bytes());
        assert!(matches!(decode(&bytes).unwrap(), Message::BalanceUpdate(_)));
    }

    proptest! {
        #[test]
        fn floats_keep_their_bits(bits in prop::collection::vec(any::<u64>(), 6), rho_bits in any::<u64>()) {
            let q = Dof::from_iterator(bits.iter().map(|b| f64::from_bits(*b)));
            let rho = f64::from_bits(rho_bits);
            let m = Message::IterShared(IterShared {
                frame: 0, attempt: 0, k: 1, from: 0,
                bodies: vec![SharedEntry { id: BodyId(0), q, rho, u: q }],
            });
            let Message::IterShared(back) = decode(&encode(&m)).unwrap() else { panic!() };
            let e = back.bodies[0];
            for i in 0..6 {
                prop_assert_eq!(e.q[i].to_bits(), q[i].to_bits());
            }
            prop_assert_eq!(e.rho.to_bits(), rho_bits);
        }

        #[test]
        fn garbage_never_panics(data in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_body(&data);
        }
    }
}
