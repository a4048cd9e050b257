//! Newline-delimited JSON messages exchanged with evaluator endpoints.
//!
//! Every request is one line:
//!
//! ```text
//! {"protocol":1,"id":4,"cmd":"eval","arch":{...},"scale":2,"seed":7}
//! {"protocol":1,"id":5,"cmd":"train","archs":[{...}],"steps":100,"lr":0.001}
//! {"protocol":1,"id":6,"cmd":"ping"}
//! ```
//!
//! and is answered by one line carrying the same id:
//!
//! ```text
//! {"id":4,"ok":true,"psnr":31.2,"cost":null}
//! {"id":5,"ok":true,"echo":[{...}]}
//! {"id":6,"ok":false,"error":"out of memory"}
//! ```
//!
//! Architectures use the [`ArchFile`] schema. Numbers are JSON doubles, so
//! integer fields also accept integral floats such as `7.0`.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize};

use super::{Evaluator, SurrogateEvaluator};
use crate::searchspace::{ArchFile, ArchSpec};

pub const PROTOCOL_VERSION: u32 = 1;

fn integral<'de, D: Deserializer<'de>, T: TryFrom<u64>>(d: D) -> Result<T, D::Error> {
    let x = f64::deserialize(d)?;
    if x.fract() != 0.0 || x < 0.0 || x > u64::MAX as f64 {
        return Err(serde::de::Error::custom(format!("expected a non-negative integer, got {x}")));
    }
    T::try_from(x as u64).map_err(|_| serde::de::Error::custom(format!("{x} is out of range")))
}

fn integral_opt<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
    #[derive(Deserialize)]
    struct Wrap(#[serde(deserialize_with = "integral")] u64);
    Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Eval {
        arch: ArchFile,
        #[serde(deserialize_with = "integral")]
        scale: u32,
        #[serde(deserialize_with = "integral")]
        seed: u64,
    },
    Train {
        archs: Vec<ArchFile>,
        #[serde(deserialize_with = "integral")]
        steps: usize,
        lr: f64,
    },
    Ping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    #[serde(deserialize_with = "integral")]
    pub protocol: u32,
    #[serde(deserialize_with = "integral")]
    pub id: u64,
    #[serde(flatten)]
    pub command: Command,
}

impl Request {
    pub fn new(id: u64, command: Command) -> Self {
        Request { protocol: PROTOCOL_VERSION, id, command }
    }

    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("request serializes");
        line.push('\n');
        line
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    /// Absent only when the endpoint could not read the request's id.
    #[serde(default, deserialize_with = "integral_opt", skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    /// Optional on responses; when present it must match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<u32>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(default)]
    pub cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo: Option<Vec<ArchFile>>,
}

impl Response {
    pub fn failure(id: Option<u64>, error: impl Into<String>) -> Self {
        Response { id, protocol: Some(PROTOCOL_VERSION), ok: false, error: Some(error.into()), ..Default::default() }
    }

    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("response serializes");
        line.push('\n');
        line
    }
}

/// Server side of the protocol. Errors become `ok:false` responses.
pub trait EndpointHandler {
    /// Returns `(psnr, cost)`; a `None` cost asks the client to compute it.
    fn eval(&mut self, arch: &ArchSpec, scale: u32, seed: u64) -> Result<(f64, Option<f64>), String>;

    fn train(&mut self, archs: &[ArchSpec], steps: usize, lr: f64) -> Result<(), String>;
}

fn handle<H: EndpointHandler + ?Sized>(line: &str, handler: &mut H) -> Response {
    let value: serde_json::Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return Response::failure(None, format!("invalid JSON: {e}")),
    };
    let id = value.get("id").and_then(|v| v.as_f64()).filter(|x| x.fract() == 0.0 && *x >= 0.0).map(|x| x as u64);
    let request: Request = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return Response::failure(id, format!("invalid request: {e}")),
    };
    if request.protocol != PROTOCOL_VERSION {
        return Response::failure(id, format!("unsupported protocol version {}", request.protocol));
    }
    let ok = |r: Response| Response { id, protocol: Some(PROTOCOL_VERSION), ok: true, ..r };
    match request.command {
        Command::Ping => ok(Response::default()),
        Command::Eval { arch, scale, seed } => {
            let result = arch.to_arch().map_err(|e| e.to_string()).and_then(|a| handler.eval(&a, scale, seed));
            match result {
                Ok((psnr, cost)) => ok(Response { psnr: Some(psnr), cost, ..Default::default() }),
                Err(e) => Response::failure(id, e),
            }
        }
        Command::Train { archs, steps, lr } => {
            let parsed: Result<Vec<ArchSpec>, String> =
                archs.iter().map(|a| a.to_arch().map_err(|e| e.to_string())).collect();
            match parsed.and_then(|list| handler.train(&list, steps, lr)) {
                Ok(()) => ok(Response { echo: Some(archs), ..Default::default() }),
                Err(e) => Response::failure(id, e),
            }
        }
    }
}

/// Answers requests line by line until the reader is exhausted.
pub fn serve<R: BufRead, W: Write, H: EndpointHandler + ?Sized>(
    reader: R,
    mut writer: W,
    handler: &mut H,
) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writer.write_all(handle(&line, handler).to_line().as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Serves the surrogate over the protocol, for tests and demos.
pub struct SurrogateEndpoint(pub SurrogateEvaluator);

impl EndpointHandler for SurrogateEndpoint {
    fn eval(&mut self, arch: &ArchSpec, _scale: u32, _seed: u64) -> Result<(f64, Option<f64>), String> {
        let m = self.0.evaluate(arch).map_err(|e| e.to_string())?;
        Ok((m.psnr, Some(m.cost)))
    }

    fn train(&mut self, archs: &[ArchSpec], steps: usize, lr: f64) -> Result<(), String> {
        self.0.train_hook(archs, steps, lr).map(|_| ()).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluators::SurrogateConfig;
    use crate::searchspace::SpaceConfig;

    fn endpoint() -> SurrogateEndpoint {
        SurrogateEndpoint(SurrogateEvaluator::new(SpaceConfig::default(), SurrogateConfig::default()))
    }

    fn roundtrip(input: &str) -> Vec<Response> {
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &mut endpoint()).unwrap();
        String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    #[test]
    fn request_wire_shape() {
        let arch = ArchFile::from_arch(&ArchSpec::zero(&SpaceConfig::default()));
        let line = Request::new(3, Command::Eval { arch, scale: 2, seed: 7 }).to_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["cmd"], "eval");
        assert_eq!(v["protocol"], 1);
        assert_eq!(v["id"], 3);
        assert_eq!(v["scale"], 2);
        assert_eq!(v["arch"]["L"], 12);
        assert!(line.ends_with('\n') && line.matches('\n').count() == 1);
    }

    #[test]
    fn integer_fields_accept_integral_doubles() {
        let r: Request = serde_json::from_str(r#"{"protocol":1.0,"id":9.0,"cmd":"ping"}"#).unwrap();
        assert_eq!(r.id, 9);
        assert!(serde_json::from_str::<Request>(r#"{"protocol":1,"id":9.5,"cmd":"ping"}"#).is_err());
    }

    #[test]
    fn serve_answers_each_command() {
        let arch = ArchFile::from_arch(&ArchSpec::zero(&SpaceConfig::default()));
        let input = [
            Request::new(1, Command::Ping).to_line(),
            Request::new(2, Command::Eval { arch: arch.clone(), scale: 2, seed: 0 }).to_line(),
            Request::new(3, Command::Train { archs: vec![arch.clone()], steps: 5, lr: 0.1 }).to_line(),
        ]
        .concat();
        let out = roundtrip(&input);
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|r| r.ok));
        assert_eq!(out.iter().map(|r| r.id).collect::<Vec<_>>(), vec![Some(1), Some(2), Some(3)]);
        assert!(out[1].psnr.unwrap() >= 28.0);
        assert!(out[1].cost.unwrap() > 0.0);
        assert_eq!(out[2].echo.as_deref(), Some(&[arch][..]));
    }

    #[test]
    fn bad_requests_get_failures_not_crashes() {
        let out = roundtrip("not json\n{\"id\":4,\"cmd\":\"ping\"}\n{\"protocol\":2,\"id\":5,\"cmd\":\"ping\"}\n{\"protocol\":1,\"id\":6,\"cmd\":\"dance\"}\n");
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|r| !r.ok && r.error.is_some()));
        assert_eq!(out.iter().map(|r| r.id).collect::<Vec<_>>(), vec![None, Some(4), Some(5), Some(6)]);
    }
}
