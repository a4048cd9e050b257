//! Client for evaluator endpoints running as child processes.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command as Process, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{Command, Request, Response, PROTOCOL_VERSION};
use super::{check_measurement, EvalError, Evaluator, Measurement, MeasurementMeta, TrainAck};
use crate::costmodel::{arch_flops, CostConfig, TensorShape};
use crate::searchspace::{ArchFile, ArchSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct ExternalConfig {
    /// Program and arguments of the endpoint.
    pub argv: Vec<String>,
    pub timeout: Duration,
    pub scale: u32,
    pub seed: u64,
    /// Shape and channel width used when the endpoint omits the cost.
    pub cost_shape: TensorShape,
    pub cost: CostConfig,
}

impl ExternalConfig {
    pub fn new(argv: Vec<String>) -> Self {
        ExternalConfig {
            argv,
            timeout: Duration::from_secs(600),
            scale: 2,
            seed: 0,
            cost_shape: TensorShape::new(3, 48, 48),
            cost: CostConfig::search(),
        }
    }
}

struct Connection {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Connection {
    fn spawn(argv: &[String]) -> Result<Self, EvalError> {
        let (program, args) =
            argv.split_first().ok_or_else(|| EvalError::Malformed("empty endpoint command".into()))?;
        let mut child = Process::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let failed = line.is_err();
                if tx.send(line).is_err() || failed {
                    break;
                }
            }
        });
        Ok(Connection { child, stdin, lines })
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// One endpoint process. A crashed endpoint is relaunched on the next call.
pub struct ExternalEvaluator {
    cfg: ExternalConfig,
    conn: Option<Connection>,
    next_id: u64,
}

impl ExternalEvaluator {
    /// Launches the endpoint.
    pub fn spawn(cfg: ExternalConfig) -> Result<Self, EvalError> {
        let conn = Connection::spawn(&cfg.argv)?;
        Ok(ExternalEvaluator { cfg, conn: Some(conn), next_id: 1 })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.cfg
    }

    fn request(&mut self, command: Command) -> Result<Response, EvalError> {
        if self.conn.is_none() {
            self.conn = Some(Connection::spawn(&self.cfg.argv)?);
        }
        let id = self.next_id;
        self.next_id += 1;
        let result = self.exchange(id, command);
        if matches!(result, Err(EvalError::Closed | EvalError::Transport(_))) {
            self.conn = None;
        }
        result
    }

    fn exchange(&mut self, id: u64, command: Command) -> Result<Response, EvalError> {
        let conn = self.conn.as_mut().expect("connected");
        let line = Request::new(id, command).to_line();
        if let Err(e) = conn.stdin.write_all(line.as_bytes()).and_then(|_| conn.stdin.flush()) {
            return Err(if e.kind() == std::io::ErrorKind::BrokenPipe { EvalError::Closed } else { e.into() });
        }
        let deadline = Instant::now() + self.cfg.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let line = match conn.lines.recv_timeout(remaining) {
                Ok(line) => line?,
                Err(RecvTimeoutError::Timeout) => return Err(EvalError::Timeout(self.cfg.timeout)),
                Err(RecvTimeoutError::Disconnected) => return Err(EvalError::Closed),
            };
            if line.trim().is_empty() {
                continue;
            }
            let response: Response =
                serde_json::from_str(&line).map_err(|e| EvalError::Malformed(format!("{e}: {line}")))?;
            if let Some(v) = response.protocol {
                if v != PROTOCOL_VERSION {
                    return Err(EvalError::Malformed(format!("protocol version {v}, expected {PROTOCOL_VERSION}")));
                }
            }
            match response.id {
                Some(rid) if rid == id => return Ok(response),
                // Late answer to a request that already timed out.
                Some(_) => continue,
                None if !response.ok => return Err(remote(&response)),
                None => return Err(EvalError::Malformed(format!("response without id: {line}"))),
            }
        }
    }

    pub fn ping(&mut self) -> Result<(), EvalError> {
        let r = self.request(Command::Ping)?;
        if r.ok {
            Ok(())
        } else {
            Err(remote(&r))
        }
    }
}

fn remote(r: &Response) -> EvalError {
    EvalError::Remote(r.error.clone().unwrap_or_else(|| "no error message".into()))
}

impl Evaluator for ExternalEvaluator {
    fn name(&self) -> &str {
        "external"
    }

    fn evaluate(&mut self, arch: &ArchSpec) -> Result<Measurement, EvalError> {
        let start = Instant::now();
        let command = Command::Eval { arch: ArchFile::from_arch(arch), scale: self.cfg.scale, seed: self.cfg.seed };
        let r = self.request(command)?;
        if !r.ok {
            return Err(remote(&r));
        }
        let psnr = r.psnr.ok_or_else(|| EvalError::Malformed("eval response has no psnr".into()))?;
        let cost = match r.cost {
            Some(c) => c,
            None => arch_flops(arch, self.cfg.cost_shape, &self.cfg.cost)?.total_macs as f64,
        };
        let m = Measurement {
            psnr,
            cost,
            meta: MeasurementMeta { evaluator: "external".into(), wall_time_secs: start.elapsed().as_secs_f64() },
        };
        check_measurement(&m)?;
        Ok(m)
    }

    fn train_hook(&mut self, archs: &[ArchSpec], steps: usize, lr: f64) -> Result<TrainAck, EvalError> {
        let sent: Vec<ArchFile> = archs.iter().map(ArchFile::from_arch).collect();
        let r = self.request(Command::Train { archs: sent.clone(), steps, lr })?;
        if !r.ok {
            return Err(remote(&r));
        }
        if r.echo.as_ref() != Some(&sent) {
            return Err(EvalError::EchoMismatch);
        }
        Ok(TrainAck { archs_received: sent.len() })
    }
}

/// Several endpoint processes evaluating a batch concurrently.
///
/// Training requests are broadcast, so every endpoint sees the same shared
/// weight updates; deterministic endpoints therefore stay in lockstep.
pub struct ExternalPool {
    workers: Vec<ExternalEvaluator>,
}

impl ExternalPool {
    pub fn spawn(cfg: ExternalConfig, size: usize) -> Result<Self, EvalError> {
        let workers = (0..size.max(1)).map(|_| ExternalEvaluator::spawn(cfg.clone())).collect::<Result<_, _>>()?;
        Ok(ExternalPool { workers })
    }

    pub fn size(&self) -> usize {
        self.workers.len()
    }
}

impl Evaluator for ExternalPool {
    fn name(&self) -> &str {
        "external"
    }

    fn evaluate(&mut self, arch: &ArchSpec) -> Result<Measurement, EvalError> {
        self.workers[0].evaluate(arch)
    }

    fn evaluate_batch(&mut self, archs: &[ArchSpec]) -> Result<Vec<Measurement>, EvalError> {
        let n = self.workers.len();
        let mut slots: Vec<Option<Result<Measurement, EvalError>>> = (0..archs.len()).map(|_| None).collect();
        thread::scope(|s| {
            let handles: Vec<_> = self
                .workers
                .iter_mut()
                .enumerate()
                .map(|(w, worker)| {
                    s.spawn(move || {
                        (w..archs.len()).step_by(n).map(|i| (i, worker.evaluate(&archs[i]))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation thread panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every index evaluated")).collect()
    }

    fn train_hook(&mut self, archs: &[ArchSpec], steps: usize, lr: f64) -> Result<TrainAck, EvalError> {
        let acks: Vec<Result<TrainAck, EvalError>> = thread::scope(|s| {
            let handles: Vec<_> =
                self.workers.iter_mut().map(|w| s.spawn(move || w.train_hook(archs, steps, lr))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        let mut acks = acks.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(acks.pop().expect("pool is nonempty"))
    }
}
