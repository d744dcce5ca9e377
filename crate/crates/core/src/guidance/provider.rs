//! Directive sources: the built-in rulebook or an external command.
//!
//! An external provider is any program that reads one JSON
//! [`GuidanceRequest`] on stdin and writes one directive in the wire format
//! to stdout. It is killed if it does not finish within the timeout.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::directive::{ContextEvent, Mode, WireWeights};
use super::rulebook::{translate_context, Rulebook};
use crate::error::{Error, Result};

/// Environment variable naming an external provider command line.
pub const PROVIDER_ENV: &str = "MURMUR_GUIDANCE_CMD";

/// Context summary sent to a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRequest {
    pub t: u64,
    pub mode: Mode,
    pub events: Vec<ContextEvent>,
    pub levels: Vec<f64>,
    pub current_weights: WireWeights,
}

pub trait GuidanceProvider: Send {
    /// Raw directive text for the request.
    fn request(&mut self, request: &GuidanceRequest) -> Result<String>;

    fn name(&self) -> &str;
}

#[derive(Debug, Clone)]
pub struct BuiltinProvider {
    rulebook: Rulebook,
}

impl BuiltinProvider {
    pub fn new(rulebook: Rulebook) -> Self {
        Self { rulebook }
    }
}

impl GuidanceProvider for BuiltinProvider {
    fn request(&mut self, request: &GuidanceRequest) -> Result<String> {
        Ok(translate_context(&request.events, request.mode, &self.rulebook).to_wire_json())
    }

    fn name(&self) -> &str {
        "builtin"
    }
}

#[derive(Debug, Clone)]
pub struct CommandProvider {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

impl CommandProvider {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        Self {
            program: program.into(),
            args,
            timeout,
        }
    }

    /// Split a command line on whitespace: the first word is the program.
    pub fn from_command_line(line: &str, timeout: Duration) -> Result<Self> {
        let mut words = line.split_whitespace().map(str::to_owned);
        let program = words.next().ok_or_else(|| Error::Provider("empty provider command".into()))?;
        Ok(Self::new(program, words.collect(), timeout))
    }

    pub fn from_env(timeout: Duration) -> Option<Result<Self>> {
        std::env::var(PROVIDER_ENV).ok().map(|line| Self::from_command_line(&line, timeout))
    }
}

impl GuidanceProvider for CommandProvider {
    fn request(&mut self, request: &GuidanceRequest) -> Result<String> {
        let body = serde_json::to_vec(request)?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Provider(format!("cannot start {}: {e}", self.program)))?;
        if let Some(mut stdin) = child.stdin.take() {
            // a provider that ignores stdin may close it early
            let _ = stdin.write_all(&body);
        }
        let mut stdout = child.stdout.take().expect("stdout is piped");
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            stdout.read_to_string(&mut buf).map(|_| buf)
        });
        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Provider(format!("{} timed out after {:?}", self.program, self.timeout)));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::Provider(e.to_string())),
            }
        };
        let out = reader
            .join()
            .map_err(|_| Error::Provider("reader thread panicked".into()))?
            .map_err(|e| Error::Provider(e.to_string()))?;
        if !status.success() {
            return Err(Error::Provider(format!("{} exited with {status}", self.program)));
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        &self.program
    }
}
