//! Newline-delimited JSON protocol for external segmentation and inpainting
//! backends running as child processes.
//!
//! Every message is one UTF-8 JSON object on one line. Requests carry an
//! `op` field (`hello`, `segment`, `inpaint`, `shutdown`); images travel as
//! base64-encoded PNG. A backend answers each request with exactly one line,
//! in order, either the op's payload or `{"error": "..."}`.

use std::collections::{BTreeSet, VecDeque};
use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::raster::{decode_image, decode_mask, BitMask, EncodePng, ImageRgb, Point};

/// Env var holding the default backend command line.
pub const BACKEND_ENV: &str = "USEGMIX_BACKEND";

/// Sampling steps requested from inpainters when the caller does not say.
pub const DEFAULT_INPAINT_STEPS: u32 = 500;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

const STDERR_TAIL: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Segment,
    Inpaint,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello,
    Segment {
        image_png_b64: String,
        point: [f64; 2],
    },
    Inpaint {
        image_png_b64: String,
        mask_png_b64: String,
        steps: u32,
    },
    Shutdown,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HelloReply {
    pub name: String,
    pub capabilities: Vec<Capability>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentReply {
    mask_png_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct InpaintReply {
    image_png_b64: String,
}

pub fn encode_b64_png(raster: &impl EncodePng) -> String {
    B64.encode(raster.encode_png())
}

fn decode_b64(field: &str, s: &str) -> Result<Vec<u8>> {
    B64.decode(s)
        .map_err(|e| Error::Backend(format!("field {field} is not valid base64: {e}")))
}

/// A live backend process. Dropping the handle sends `shutdown` and reaps
/// the child, killing it if it does not exit within the timeout.
pub struct BackendHandle {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<io::Result<String>>,
    stderr_tail: Arc<Mutex<VecDeque<String>>>,
    timeout: Duration,
    name: String,
    capabilities: BTreeSet<Capability>,
    // set once a reply was lost (timeout); later replies could be misattributed
    poisoned: bool,
}

impl std::fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendHandle")
            .field("command", &self.command)
            .field("name", &self.name)
            .field("capabilities", &self.capabilities)
            .finish_non_exhaustive()
    }
}

/// Spawns `cmd` (whitespace-separated program and arguments) with the default
/// timeout and performs the `hello` handshake.
pub fn spawn_backend(cmd: &str) -> Result<BackendHandle> {
    let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
    BackendHandle::spawn(&argv, DEFAULT_TIMEOUT)
}

impl BackendHandle {
    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Backend("empty backend command".into()))?;
        let command = argv.join(" ");
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("failed to spawn `{command}`: {e}")))?;

        let stdout = child.stdout.take().expect("stdout is piped");
        let stderr = child.stderr.take().expect("stderr is piped");
        let stdin = child.stdin.take();

        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });

        let stderr_tail = Arc::new(Mutex::new(VecDeque::new()));
        let tail = Arc::clone(&stderr_tail);
        thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(|l| l.ok()) {
                let mut t = tail.lock().unwrap_or_else(|e| e.into_inner());
                if t.len() == STDERR_TAIL {
                    t.pop_front();
                }
                t.push_back(line);
            }
        });

        let mut handle = BackendHandle {
            command,
            child,
            stdin,
            lines,
            stderr_tail,
            timeout,
            name: String::new(),
            capabilities: BTreeSet::new(),
            poisoned: false,
        };
        handle.handshake()?;
        Ok(handle)
    }

    fn handshake(&mut self) -> Result<()> {
        self.send(&Request::Hello)?;
        let line = self.recv_line()?;
        let hello: HelloReply = serde_json::from_str(&line).map_err(|e| {
            self.backend_error(format!("handshake failed, first bad line {line:?}: {e}"))
        })?;
        self.name = hello.name;
        self.capabilities = hello.capabilities.into_iter().collect();
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn capabilities(&self) -> &BTreeSet<Capability> {
        &self.capabilities
    }

    pub fn has(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn backend_error(&self, message: String) -> Error {
        let tail = self.stderr_tail.lock().unwrap_or_else(|e| e.into_inner());
        if tail.is_empty() {
            Error::Backend(format!("`{}`: {message}", self.command))
        } else {
            let diag: Vec<&str> = tail.iter().map(String::as_str).collect();
            Error::Backend(format!(
                "`{}`: {message}; stderr: {}",
                self.command,
                diag.join(" | ")
            ))
        }
    }

    fn send(&mut self, req: &Request) -> Result<()> {
        let mut line = serde_json::to_string(req).expect("requests serialize");
        line.push('\n');
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Backend("backend stdin already closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| self.backend_error(format!("write failed: {e}")))
    }

    fn recv_line(&mut self) -> Result<String> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(self.backend_error(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                self.poisoned = true;
                Err(Error::Timeout(self.timeout.as_secs_f64()))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(self.backend_error("backend closed its output".into()))
            }
        }
    }

    /// One request, one reply. `{"error": ...}` replies become errors.
    pub fn call(&mut self, req: &Request) -> Result<Value> {
        if self.poisoned {
            return Err(Error::Backend(format!(
                "`{}`: handle unusable after an earlier timeout",
                self.command
            )));
        }
        self.send(req)?;
        let line = self.recv_line()?;
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| self.backend_error(format!("malformed reply {line:?}: {e}")))?;
        if let Some(err) = value.get("error") {
            let msg = err.as_str().map(str::to_owned).unwrap_or_else(|| err.to_string());
            return Err(self.backend_error(format!("backend reported: {msg}")));
        }
        Ok(value)
    }

    fn require(&self, cap: Capability) -> Result<()> {
        if self.has(cap) {
            Ok(())
        } else {
            Err(Error::Backend(format!(
                "backend `{}` lacks the {cap:?} capability",
                self.name
            )))
        }
    }

    /// Point-prompted segmentation; the mask must match the image size.
    pub fn request_segment(&mut self, img: &ImageRgb, p: Point) -> Result<BitMask> {
        self.require(Capability::Segment)?;
        let reply = self.call(&Request::Segment {
            image_png_b64: encode_b64_png(img),
            point: [p.x, p.y],
        })?;
        let reply: SegmentReply = serde_json::from_value(reply)
            .map_err(|e| self.backend_error(format!("bad segment reply: {e}")))?;
        let mask = decode_mask(&decode_b64("mask_png_b64", &reply.mask_png_b64)?)?;
        if mask.dims() != img.dims() {
            return Err(Error::DimensionMismatch {
                expected: img.dims(),
                found: mask.dims(),
            });
        }
        Ok(mask)
    }

    /// Inpaints `mask` pixels of `img`; `steps` defaults to 500.
    pub fn request_inpaint(&mut self, img: &ImageRgb, mask: &BitMask, steps: Option<u32>) -> Result<ImageRgb> {
        self.require(Capability::Inpaint)?;
        if mask.dims() != img.dims() {
            return Err(Error::DimensionMismatch {
                expected: img.dims(),
                found: mask.dims(),
            });
        }
        let reply = self.call(&Request::Inpaint {
            image_png_b64: encode_b64_png(img),
            mask_png_b64: encode_b64_png(mask),
            steps: steps.unwrap_or(DEFAULT_INPAINT_STEPS),
        })?;
        let reply: InpaintReply = serde_json::from_value(reply)
            .map_err(|e| self.backend_error(format!("bad inpaint reply: {e}")))?;
        let out = decode_image(&decode_b64("image_png_b64", &reply.image_png_b64)?)?;
        if out.dims() != img.dims() {
            return Err(Error::DimensionMismatch {
                expected: img.dims(),
                found: out.dims(),
            });
        }
        Ok(out)
    }
}

impl Drop for BackendHandle {
    fn drop(&mut self) {
        if let Some(mut stdin) = self.stdin.take() {
            let mut line = serde_json::to_string(&Request::Shutdown).expect("requests serialize");
            line.push('\n');
            let _ = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush());
        }
        let deadline = Instant::now() + self.timeout.min(Duration::from_secs(5));
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                _ => break,
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Server side of the protocol, for writing backends in Rust.
pub trait BackendService {
    fn name(&self) -> String;
    fn capabilities(&self) -> Vec<Capability>;
    fn segment(&mut self, img: &ImageRgb, p: Point) -> std::result::Result<BitMask, String>;
    fn inpaint(&mut self, img: &ImageRgb, mask: &BitMask, steps: u32) -> std::result::Result<ImageRgb, String>;

    /// Hook for fixtures that misbehave during the handshake.
    fn before_hello(&mut self, _out: &mut dyn Write) -> io::Result<()> {
        Ok(())
    }
}

/// Request loop: one reply line per request line until `shutdown` or EOF.
/// Malformed requests get an error reply and the loop continues.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, service: &mut impl BackendService) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Err(e) => error_reply(format!("malformed request: {e}")),
            Ok(Request::Shutdown) => return Ok(()),
            Ok(Request::Hello) => {
                service.before_hello(&mut output)?;
                serde_json::to_value(HelloReply {
                    name: service.name(),
                    capabilities: service.capabilities(),
                })
                .expect("hello serializes")
            }
            Ok(Request::Segment { image_png_b64, point }) => decode_request_image(&image_png_b64)
                .and_then(|img| service.segment(&img, Point::new(point[0], point[1])))
                .map(|mask| serde_json::json!({ "mask_png_b64": encode_b64_png(&mask) }))
                .unwrap_or_else(error_reply),
            Ok(Request::Inpaint {
                image_png_b64,
                mask_png_b64,
                steps,
            }) => decode_request_image(&image_png_b64)
                .and_then(|img| {
                    let mask = B64
                        .decode(&mask_png_b64)
                        .map_err(|e| e.to_string())
                        .and_then(|b| decode_mask(&b).map_err(|e| e.to_string()))?;
                    service.inpaint(&img, &mask, steps)
                })
                .map(|img| serde_json::json!({ "image_png_b64": encode_b64_png(&img) }))
                .unwrap_or_else(error_reply),
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

fn error_reply(message: String) -> Value {
    serde_json::json!({ "error": message })
}

fn decode_request_image(b64: &str) -> std::result::Result<ImageRgb, String> {
    let bytes = B64.decode(b64).map_err(|e| e.to_string())?;
    decode_image(&bytes).map_err(|e| e.to_string())
}

/// Canned backends used to exercise the protocol.
pub mod fixtures {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum FixtureMode {
        /// Full-image masks; inpaint returns its input.
        Echo,
        /// Masks with just the prompt pixel set.
        Point,
        /// Masks one pixel wider than the image.
        WrongSize,
        /// Inpaint fills the mask with the mean color of unmasked pixels
        /// 4-adjacent to it.
        MeanFill,
        /// Inpaint inverts every pixel, including those outside the mask.
        AlterOutside,
        /// Every request gets an error reply.
        Fail,
        /// Prints a non-JSON line before the hello reply.
        Garbage,
        /// Never answers segment or inpaint requests.
        Hang,
    }

    impl std::str::FromStr for FixtureMode {
        type Err = String;

        fn from_str(s: &str) -> std::result::Result<Self, String> {
            Ok(match s {
                "echo" => Self::Echo,
                "point" => Self::Point,
                "wrong-size" => Self::WrongSize,
                "mean-fill" => Self::MeanFill,
                "alter-outside" => Self::AlterOutside,
                "fail" => Self::Fail,
                "garbage" => Self::Garbage,
                "hang" => Self::Hang,
                other => return Err(format!("unknown fixture mode {other:?}")),
            })
        }
    }

    pub struct FixtureService {
        pub mode: FixtureMode,
    }

    impl BackendService for FixtureService {
        fn name(&self) -> String {
            format!("fixture-{:?}", self.mode).to_lowercase()
        }

        fn capabilities(&self) -> Vec<Capability> {
            vec![Capability::Segment, Capability::Inpaint]
        }

        fn before_hello(&mut self, out: &mut dyn Write) -> io::Result<()> {
            if self.mode == FixtureMode::Garbage {
                writeln!(out, "loading weights... done")?;
            }
            Ok(())
        }

        fn segment(&mut self, img: &ImageRgb, p: Point) -> std::result::Result<BitMask, String> {
            let (w, h) = img.dims();
            match self.mode {
                FixtureMode::Fail => Err("fixture failure".into()),
                FixtureMode::Hang => loop {
                    thread::sleep(Duration::from_secs(3600));
                },
                FixtureMode::WrongSize => BitMask::full(w + 1, h).map_err(|e| e.to_string()),
                FixtureMode::Point => {
                    let (x, y) = p.pixel(w, h).ok_or("prompt outside image")?;
                    BitMask::from_pixels(w, h, &[(x, y)]).map_err(|e| e.to_string())
                }
                _ => BitMask::full(w, h).map_err(|e| e.to_string()),
            }
        }

        fn inpaint(&mut self, img: &ImageRgb, mask: &BitMask, _steps: u32) -> std::result::Result<ImageRgb, String> {
            match self.mode {
                FixtureMode::Fail => Err("fixture failure".into()),
                FixtureMode::Hang => loop {
                    thread::sleep(Duration::from_secs(3600));
                },
                FixtureMode::AlterOutside => {
                    let data = img.data().iter().map(|v| 255 - v).collect();
                    ImageRgb::from_raw(img.width(), img.height(), data).map_err(|e| e.to_string())
                }
                FixtureMode::MeanFill => Ok(mean_fill(img, mask)),
                _ => Ok(img.clone()),
            }
        }
    }

    fn mean_fill(img: &ImageRgb, mask: &BitMask) -> ImageRgb {
        let (w, h) = img.dims();
        let mut sum = [0u64; 3];
        let mut n = 0u64;
        for i in 0..w * h {
            if mask.at(i) {
                continue;
            }
            let touches = crate::superpixel::neighbors4(i, w, h)
                .into_iter()
                .flatten()
                .any(|j| mask.at(j));
            if touches {
                let p = img.pixel(i);
                for c in 0..3 {
                    sum[c] += u64::from(p[c]);
                }
                n += 1;
            }
        }
        let fill = if n == 0 {
            [0, 0, 0]
        } else {
            [0, 1, 2].map(|c| ((sum[c] as f64 / n as f64).round()) as u8)
        };
        let mut out = img.clone();
        for i in 0..w * h {
            if mask.at(i) {
                out.set_pixel(i, fill);
            }
        }
        out
    }
}
