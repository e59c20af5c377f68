//! Worker protocol of the multi-process backend: length-prefixed binary
//! frames over local sockets. All integers and floats are little-endian;
//! floats are 64-bit. Every reply echoes the parameter version it was
//! computed under so stale workers are detected.
//!
//! Frame: u32 payload length, then payload = u8 message tag + body.
//!
//! Messages:
//!   1 LoadShard      shard_id, row range, model config JSON, data rows
//!   2 Broadcast      version, packed parameter vector
//!   3 MapRequest     version, layer bitmask
//!   4 MapReply       shard_id, version, PartialReduction
//!   5 ScatterRequest version, per-layer adjoint bundles
//!   6 ScatterReply   shard_id, version, packed gradient partial
//!   7 Shutdown
//!   8 ErrorReply     shard_id, message

use crate::bound::{LayerAdjoints, LayerStats};
use crate::error::{Error, Result};
use crate::executor::{map_shard, Shard};
use crate::model::{DgpModel, Mode, ModelConfig, ModelStats, Posteriors};
use crate::scalar::Real;
use ndarray::{s, Array1, Array2};
use std::io::{Read, Write};
use std::os::unix::net::UnixStream;

pub const TAG_LOAD_SHARD: u8 = 1;
pub const TAG_BROADCAST: u8 = 2;
pub const TAG_MAP_REQUEST: u8 = 3;
pub const TAG_MAP_REPLY: u8 = 4;
pub const TAG_SCATTER_REQUEST: u8 = 5;
pub const TAG_SCATTER_REPLY: u8 = 6;
pub const TAG_SHUTDOWN: u8 = 7;
pub const TAG_ERROR: u8 = 8;

const MAX_FRAME: usize = 1 << 30;

/// Environment variable naming the directory for worker sockets.
pub const SOCKET_DIR_ENV: &str = "DEEPGP_WORKER_SOCKET_DIR";

// ---- framing -------------------------------------------------------------

pub fn write_frame(stream: &mut impl Write, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(Error::Protocol("frame too large".into()));
    }
    stream.write_all(&(payload.len() as u32).to_le_bytes())?;
    stream.write_all(payload)?;
    stream.flush()?;
    Ok(())
}

pub fn read_frame(stream: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol("frame too large".into()));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

// ---- payload encoding ------------------------------------------------------

#[derive(Default)]
pub struct Enc {
    pub buf: Vec<u8>,
}

impl Enc {
    pub fn tag(t: u8) -> Self {
        Enc { buf: vec![t] }
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn floats<F: Real>(&mut self, it: impl Iterator<Item = F>) -> &mut Self {
        for v in it {
            self.f64(v.to_f64c());
        }
        self
    }

    pub fn matrix<F: Real>(&mut self, m: &Array2<F>) -> &mut Self {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        self.floats(m.iter().copied());
        self
    }
}

pub struct Dec<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Dec { buf, at: 0 }
    }

    fn need(&self, k: usize) -> Result<()> {
        if self.at + k > self.buf.len() {
            Err(Error::Protocol("truncated frame".into()))
        } else {
            Ok(())
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        let v = self.buf[self.at];
        self.at += 1;
        Ok(v)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.need(8)?;
        let v = u64::from_le_bytes(self.buf[self.at..self.at + 8].try_into().unwrap());
        self.at += 8;
        Ok(v)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.need(8)?;
        let v = f64::from_le_bytes(self.buf[self.at..self.at + 8].try_into().unwrap());
        self.at += 8;
        Ok(v)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.need(len)?;
        let b = &self.buf[self.at..self.at + len];
        self.at += len;
        Ok(b)
    }

    pub fn floats<F: Real>(&mut self, n: usize) -> Result<Array1<F>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(F::c(self.f64()?));
        }
        Ok(Array1::from_vec(out))
    }

    pub fn matrix<F: Real>(&mut self) -> Result<Array2<F>> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        if rows.saturating_mul(cols) > MAX_FRAME / 8 {
            return Err(Error::Protocol("matrix too large".into()));
        }
        let flat = self.floats::<F>(rows * cols)?;
        Ok(Array2::from_shape_vec((rows, cols), flat.to_vec()).unwrap())
    }
}

// ---- message bodies --------------------------------------------------------

pub fn encode_load_shard<F: Real>(
    shard: &Shard,
    config: &ModelConfig,
    y_rows: &Array2<F>,
    sup_rows: Option<&Array2<F>>,
) -> Result<Vec<u8>> {
    let mut e = Enc::tag(TAG_LOAD_SHARD);
    e.u64(shard.shard_id as u64)
        .u64(shard.begin as u64)
        .u64(shard.end as u64);
    let json = serde_json::to_vec(config)
        .map_err(|err| Error::Protocol(format!("config encode: {err}")))?;
    e.bytes(&json);
    e.matrix(y_rows);
    e.u64(u64::from(sup_rows.is_some()));
    if let Some(sup) = sup_rows {
        e.matrix(sup);
    }
    Ok(e.buf)
}

pub fn encode_broadcast<F: Real>(version: u64, params: &Array1<F>) -> Vec<u8> {
    let mut e = Enc::tag(TAG_BROADCAST);
    e.u64(version).u64(params.len() as u64).floats(params.iter().copied());
    e.buf
}

pub fn encode_map_request(version: u64, layer_mask: u64) -> Vec<u8> {
    let mut e = Enc::tag(TAG_MAP_REQUEST);
    e.u64(version).u64(layer_mask);
    e.buf
}

pub fn encode_map_reply<F: Real>(shard_id: usize, version: u64, stats: &ModelStats<F>) -> Vec<u8> {
    let mut e = Enc::tag(TAG_MAP_REPLY);
    e.u64(shard_id as u64)
        .u64(version)
        .u64(stats.count as u64)
        .f64(stats.top_mean_sq.to_f64c())
        .u64(stats.layers.len() as u64);
    for ls in &stats.layers {
        e.u64(ls.phi.nrows() as u64)
            .u64(ls.c.ncols() as u64)
            .f64(ls.psi0.to_f64c())
            .f64(ls.trace_targets.to_f64c())
            .floats(ls.phi.iter().copied())
            .floats(ls.c.iter().copied())
            .floats(ls.g.iter().copied());
    }
    e.buf
}

pub fn decode_map_reply<F: Real>(d: &mut Dec<'_>) -> Result<(usize, u64, ModelStats<F>)> {
    let shard_id = d.u64()? as usize;
    let version = d.u64()?;
    let count = d.u64()? as usize;
    let top_mean_sq = F::c(d.f64()?);
    let n_layers = d.u64()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let m = d.u64()? as usize;
        let dd = d.u64()? as usize;
        let psi0 = F::c(d.f64()?);
        let trace_targets = F::c(d.f64()?);
        let phi_flat = d.floats::<F>(m * m)?;
        let c_flat = d.floats::<F>(m * dd)?;
        let g_flat = d.floats::<F>(m * m)?;
        layers.push(LayerStats {
            psi0,
            phi: Array2::from_shape_vec((m, m), phi_flat.to_vec()).unwrap(),
            c: Array2::from_shape_vec((m, dd), c_flat.to_vec()).unwrap(),
            g: Array2::from_shape_vec((m, m), g_flat.to_vec()).unwrap(),
            trace_targets,
            count,
        });
    }
    Ok((
        shard_id,
        version,
        ModelStats {
            layers,
            top_mean_sq,
            count,
        },
    ))
}

pub fn encode_scatter_request<F: Real>(version: u64, adjoints: &[LayerAdjoints<F>]) -> Vec<u8> {
    let mut e = Enc::tag(TAG_SCATTER_REQUEST);
    e.u64(version).u64(adjoints.len() as u64);
    for a in adjoints {
        e.f64(a.beta.to_f64c())
            .f64(a.psi0bar.to_f64c())
            .matrix(&a.e)
            .matrix(&a.p)
            .matrix(&a.phibar);
    }
    e.buf
}

pub fn decode_scatter_request<F: Real>(d: &mut Dec<'_>) -> Result<(u64, Vec<LayerAdjoints<F>>)> {
    let version = d.u64()?;
    let n_layers = d.u64()? as usize;
    let mut out = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let beta = F::c(d.f64()?);
        let psi0bar = F::c(d.f64()?);
        let e: Array2<F> = d.matrix()?;
        let p: Array2<F> = d.matrix()?;
        let phibar: Array2<F> = d.matrix()?;
        let m = p.nrows();
        out.push(LayerAdjoints {
            beta,
            e,
            p,
            kbar: Array2::zeros((m, m)), // central-only, not transmitted
            phibar,
            psi0bar,
            dvalue_dnoise: F::zero(),
            used_jitter: F::zero(),
        });
    }
    Ok((version, out))
}

pub fn encode_scatter_reply<F: Real>(shard_id: usize, version: u64, grad: &Array1<F>) -> Vec<u8> {
    let mut e = Enc::tag(TAG_SCATTER_REPLY);
    e.u64(shard_id as u64)
        .u64(version)
        .u64(grad.len() as u64)
        .floats(grad.iter().copied());
    e.buf
}

pub fn encode_error(shard_id: usize, msg: &str) -> Vec<u8> {
    let mut e = Enc::tag(TAG_ERROR);
    e.u64(shard_id as u64).bytes(msg.as_bytes());
    e.buf
}

// ---- worker -----------------------------------------------------------------

struct LoadedShard {
    shard: Shard,
    y: Array2<f64>,
    sup: Option<Array2<f64>>,
}

/// Serve one coordinator connection until Shutdown or EOF. The worker is
/// f64 internally, matching the wire format.
pub fn serve_worker(mut stream: UnixStream) -> Result<()> {
    let mut shards: Vec<LoadedShard> = Vec::new();
    let mut config: Option<ModelConfig> = None;
    let mut model: Option<DgpModel<f64>> = None;
    let mut held_version: u64 = 0;
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let mut d = Dec::new(&frame);
        match d.u8()? {
            TAG_LOAD_SHARD => {
                let shard_id = d.u64()? as usize;
                let begin = d.u64()? as usize;
                let end = d.u64()? as usize;
                let json = d.bytes()?;
                let cfg: ModelConfig = serde_json::from_slice(json)
                    .map_err(|e| Error::Protocol(format!("config decode: {e}")))?;
                let y: Array2<f64> = d.matrix()?;
                let has_sup = d.u64()? != 0;
                let sup = if has_sup { Some(d.matrix()?) } else { None };
                config = Some(cfg);
                model = None;
                shards.push(LoadedShard {
                    shard: Shard {
                        shard_id,
                        begin,
                        end,
                    },
                    y,
                    sup,
                });
            }
            TAG_BROADCAST => {
                let v = d.u64()?;
                let len = d.u64()? as usize;
                let params = d.floats::<f64>(len)?;
                let cfg = config
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("broadcast before load".into()))?;
                let mut skeleton: DgpModel<f64> = cfg.build_skeleton()?;
                skeleton.unpack_parameters(&params.view())?;
                model = Some(skeleton);
                held_version = v;
            }
            TAG_MAP_REQUEST => {
                let v = d.u64()?;
                let mask = d.u64()?;
                if v != held_version {
                    return Err(Error::StaleWorker {
                        expected: v,
                        got: held_version,
                    });
                }
                let full = model
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("map before broadcast".into()))?;
                for ls in &shards {
                    let reply = (|| -> Result<Vec<u8>> {
                        let local = localize(full, ls)?;
                        let local_shard = Shard {
                            shard_id: ls.shard.shard_id,
                            begin: 0,
                            end: ls.y.nrows(),
                        };
                        let mut partial = map_shard(&local, &ls.y.view(), &local_shard)?;
                        for (i, layer) in partial.stats.layers.iter_mut().enumerate() {
                            if mask & (1 << i.min(63)) == 0 {
                                *layer = LayerStats::zeros(layer.phi.nrows(), layer.c.ncols());
                            }
                        }
                        Ok(encode_map_reply(ls.shard.shard_id, v, &partial.stats))
                    })();
                    match reply {
                        Ok(buf) => write_frame(&mut stream, &buf)?,
                        Err(e) => write_frame(
                            &mut stream,
                            &encode_error(ls.shard.shard_id, &e.to_string()),
                        )?,
                    }
                }
            }
            TAG_SCATTER_REQUEST => {
                let (v, adjoints) = decode_scatter_request::<f64>(&mut d)?;
                if v != held_version {
                    return Err(Error::StaleWorker {
                        expected: v,
                        got: held_version,
                    });
                }
                let full = model
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("scatter before broadcast".into()))?;
                for ls in &shards {
                    let reply = (|| -> Result<Vec<u8>> {
                        let local = localize(full, ls)?;
                        let shard_out =
                            local.scatter_rows(&ls.y.view(), 0, ls.y.nrows(), &adjoints)?;
                        let grad = full.pack_shard_gradient(
                            &ls.y.view(),
                            ls.shard.begin,
                            shard_out,
                        )?;
                        Ok(encode_scatter_reply(ls.shard.shard_id, v, &grad))
                    })();
                    match reply {
                        Ok(buf) => write_frame(&mut stream, &buf)?,
                        Err(e) => write_frame(
                            &mut stream,
                            &encode_error(ls.shard.shard_id, &e.to_string()),
                        )?,
                    }
                }
            }
            TAG_SHUTDOWN => return Ok(()),
            other => return Err(Error::Protocol(format!("unexpected tag {other}"))),
        }
    }
}

/// A worker's view of the model for one shard: explicit posteriors sliced
/// to the local rows, supervised inputs replaced by the local rows.
fn localize(full: &DgpModel<f64>, ls: &LoadedShard) -> Result<DgpModel<f64>> {
    let posteriors = match &full.posteriors {
        Posteriors::Recognition(stack) => Posteriors::Recognition(stack.clone()),
        Posteriors::Explicit(qs) => Posteriors::Explicit(
            qs.iter()
                .map(|q| q.slice_rows(ls.shard.begin, ls.shard.end))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let mode = match &full.mode {
        Mode::Unsupervised => Mode::Unsupervised,
        Mode::Supervised {
            skip_connection, ..
        } => Mode::Supervised {
            inputs: ls
                .sup
                .clone()
                .ok_or_else(|| Error::Protocol("supervised shard without inputs".into()))?,
            skip_connection: *skip_connection,
        },
    };
    Ok(DgpModel {
        layers: full.layers.clone(),
        posteriors,
        mode,
    })
}

// ---- coordinator --------------------------------------------------------------

struct WorkerConn {
    stream: UnixStream,
    shard_ids: Vec<usize>,
}

/// Multi-process evaluator speaking the worker protocol. Workers are handed
/// their shards round-robin; the shard partition itself depends only on
/// `shard_count`, so the worker count never changes the numbers.
pub struct ProcessEvaluator<F> {
    y: Array2<F>,
    shards: Vec<Shard>,
    workers: Vec<WorkerConn>,
    version: u64,
    deterministic: bool,
    children: Vec<std::process::Child>,
}

impl<F: Real> ProcessEvaluator<F> {
    /// Wire up pre-connected worker streams (tests may serve them from
    /// threads; the CLI passes sockets of spawned processes).
    pub fn from_streams(
        y: Array2<F>,
        sup: Option<&Array2<F>>,
        config: &ModelConfig,
        shard_count: usize,
        streams: Vec<UnixStream>,
        deterministic: bool,
    ) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::Protocol("no workers".into()));
        }
        let shards = crate::executor::make_shards(y.nrows(), shard_count);
        let mut workers: Vec<WorkerConn> = streams
            .into_iter()
            .map(|stream| WorkerConn {
                stream,
                shard_ids: Vec::new(),
            })
            .collect();
        for (i, shard) in shards.iter().enumerate() {
            let w = i % workers.len();
            let y_rows = y.slice(s![shard.begin..shard.end, ..]).to_owned();
            let sup_rows = sup.map(|x| x.slice(s![shard.begin..shard.end, ..]).to_owned());
            let frame = encode_load_shard(shard, config, &y_rows, sup_rows.as_ref())?;
            write_frame(&mut workers[w].stream, &frame)?;
            workers[w].shard_ids.push(shard.shard_id);
        }
        Ok(ProcessEvaluator {
            y,
            shards,
            workers,
            version: 0,
            deterministic,
            children: Vec::new(),
        })
    }

    /// Spawn worker processes with the given command builder (receives the
    /// socket path), accept their connections and distribute shards.
    pub fn spawn(
        y: Array2<F>,
        sup: Option<&Array2<F>>,
        config: &ModelConfig,
        shard_count: usize,
        n_workers: usize,
        deterministic: bool,
        command: impl Fn(&std::path::Path) -> std::process::Command,
    ) -> Result<Self> {
        let dir = std::env::var_os(SOCKET_DIR_ENV)
            .map(std::path::PathBuf::from)
            .unwrap_or_else(std::env::temp_dir);
        let sock = dir.join(format!(
            "deepgp-worker-{}-{}.sock",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        let listener = std::os::unix::net::UnixListener::bind(&sock)?;
        let mut children = Vec::with_capacity(n_workers);
        for _ in 0..n_workers.max(1) {
            let child = command(&sock)
                .spawn()
                .map_err(|e| Error::Protocol(format!("spawn worker: {e}")))?;
            children.push(child);
        }
        let mut streams = Vec::with_capacity(children.len());
        for _ in 0..children.len() {
            let (stream, _) = listener.accept()?;
            streams.push(stream);
        }
        drop(listener);
        let _ = std::fs::remove_file(&sock);
        let mut me = Self::from_streams(y, sup, config, shard_count, streams, deterministic)?;
        me.children = children;
        Ok(me)
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    fn broadcast(&mut self, model: &DgpModel<F>) -> Result<()> {
        self.version += 1;
        let params = model.pack_parameters();
        let frame = encode_broadcast(self.version, &params);
        for w in &mut self.workers {
            write_frame(&mut w.stream, &frame)?;
        }
        Ok(())
    }

    fn collect_map(&mut self) -> Result<Vec<(Shard, ModelStats<F>)>> {
        let frame = encode_map_request(self.version, u64::MAX);
        for w in &mut self.workers {
            write_frame(&mut w.stream, &frame)?;
        }
        let mut out = Vec::new();
        let shards = self.shards.clone();
        for w in &mut self.workers {
            for _ in 0..w.shard_ids.len() {
                let reply = read_frame(&mut w.stream)?;
                let mut d = Dec::new(&reply);
                match d.u8()? {
                    TAG_MAP_REPLY => {
                        let (shard_id, version, stats) = decode_map_reply::<F>(&mut d)?;
                        if version != self.version {
                            return Err(Error::StaleWorker {
                                expected: self.version,
                                got: version,
                            });
                        }
                        let shard = shards
                            .iter()
                            .find(|s| s.shard_id == shard_id)
                            .ok_or_else(|| Error::Protocol(format!("unknown shard {shard_id}")))?;
                        out.push((*shard, stats));
                    }
                    TAG_ERROR => {
                        let shard_id = d.u64()? as usize;
                        let msg = String::from_utf8_lossy(d.bytes()?).into_owned();
                        return Err(Error::Protocol(msg).in_shard(shard_id));
                    }
                    other => return Err(Error::Protocol(format!("unexpected tag {other}"))),
                }
            }
        }
        Ok(out)
    }

    fn collect_scatter(&mut self, adjoints: &[LayerAdjoints<F>]) -> Result<Vec<(usize, Array1<F>)>> {
        let frame = encode_scatter_request(self.version, adjoints);
        for w in &mut self.workers {
            write_frame(&mut w.stream, &frame)?;
        }
        let mut out = Vec::new();
        for w in &mut self.workers {
            for _ in 0..w.shard_ids.len() {
                let reply = read_frame(&mut w.stream)?;
                let mut d = Dec::new(&reply);
                match d.u8()? {
                    TAG_SCATTER_REPLY => {
                        let shard_id = d.u64()? as usize;
                        let version = d.u64()?;
                        if version != self.version {
                            return Err(Error::StaleWorker {
                                expected: self.version,
                                got: version,
                            });
                        }
                        let len = d.u64()? as usize;
                        let grad = d.floats::<F>(len)?;
                        out.push((shard_id, grad));
                    }
                    TAG_ERROR => {
                        let shard_id = d.u64()? as usize;
                        let msg = String::from_utf8_lossy(d.bytes()?).into_owned();
                        return Err(Error::Protocol(msg).in_shard(shard_id));
                    }
                    other => return Err(Error::Protocol(format!("unexpected tag {other}"))),
                }
            }
        }
        Ok(out)
    }

    pub fn shutdown(&mut self) {
        for w in &mut self.workers {
            let _ = write_frame(&mut w.stream, &[TAG_SHUTDOWN]);
        }
        for c in &mut self.children {
            let _ = c.wait();
        }
        self.children.clear();
    }
}

impl<F> Drop for ProcessEvaluator<F> {
    fn drop(&mut self) {
        for w in &mut self.workers {
            let _ = write_frame(&mut w.stream, &[TAG_SHUTDOWN]);
        }
        for c in &mut self.children {
            let _ = c.wait();
        }
    }
}

impl<F: Real> crate::executor::BoundEvaluator<F> for ProcessEvaluator<F> {
    fn n_rows(&self) -> usize {
        self.y.nrows()
    }

    fn data_dim(&self) -> usize {
        self.y.ncols()
    }

    fn evaluate(
        &mut self,
        model: &DgpModel<F>,
        want_grad: bool,
    ) -> Result<(crate::model::BoundBreakdown<F>, Option<Array1<F>>)> {
        self.broadcast(model)?;
        let mut partials: Vec<(Shard, crate::executor::PartialReduction<F>)> = self
            .collect_map()?
            .into_iter()
            .map(|(s, stats)| {
                (
                    s,
                    crate::executor::PartialReduction {
                        shard_id: s.shard_id,
                        stats,
                    },
                )
            })
            .collect();
        if self.deterministic {
            partials.sort_by_key(|(s, _)| s.shard_id);
        }
        let stats = crate::executor::reduce(partials, self.y.nrows(), self.deterministic)?;
        let (breakdown, results) = model.assemble(&stats, self.y.ncols())?;
        if !want_grad {
            return Ok((breakdown, None));
        }
        let adjoints = model.adjoints(&stats, &results, self.y.ncols());
        let mut grads = self.collect_scatter(&adjoints)?;
        if self.deterministic {
            grads.sort_by_key(|(id, _)| *id);
        }
        let mut total = model.central_gradient_vector(self.y.nrows(), &adjoints)?;
        for (_, g) in grads {
            total = &total + &g;
        }
        Ok((breakdown, Some(total)))
    }
}
