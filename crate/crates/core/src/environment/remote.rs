//! Line-delimited JSON protocol for an external environment.
//!
//! Each turn the client writes one request line and reads one response line:
//!
//! ```text
//! > {"type":"step","version":1,"episode_id":"e0","turn":1,"agent_arm":3,"augmented_persona_text":"..."}
//! < {"version":1,"raw_dims":[8,0,5,-2,0,1,7],"opponent_utterance":"...","done":false}
//! ```
//!
//! `agent_arm` is `null` for the unmodified persona. Responses with another
//! version, a wrong number of dimensions or out-of-range scores are rejected.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{agent_utterance, normalize_reward, EnvError, RawDims, SocialEnvironment, TurnRecord};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    #[serde(rename = "type")]
    pub kind: String,
    pub version: u32,
    pub episode_id: String,
    pub turn: usize,
    pub agent_arm: Option<usize>,
    pub augmented_persona_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub version: u32,
    pub raw_dims: Vec<f64>,
    #[serde(default)]
    pub opponent_utterance: String,
    #[serde(default)]
    pub done: bool,
}

pub struct RemoteEnvironment<R: BufRead, W: Write> {
    reader: R,
    writer: W,
    arms: usize,
    turns_per_episode: usize,
    episode: usize,
    turn: usize,
    done: bool,
}

impl RemoteEnvironment<BufReader<TcpStream>, TcpStream> {
    pub fn connect(address: &str, arms: usize, turns_per_episode: usize, timeout: Duration) -> Result<Self, EnvError> {
        let stream = TcpStream::connect(address).map_err(|e| EnvError::Remote(format!("connect {address}: {e}")))?;
        stream
            .set_read_timeout(Some(timeout))
            .and_then(|_| stream.set_write_timeout(Some(timeout)))
            .map_err(|e| EnvError::Remote(e.to_string()))?;
        let reader = BufReader::new(stream.try_clone().map_err(|e| EnvError::Remote(e.to_string()))?);
        Ok(Self::new(reader, stream, arms, turns_per_episode))
    }
}

impl<R: BufRead, W: Write> RemoteEnvironment<R, W> {
    pub fn new(reader: R, writer: W, arms: usize, turns_per_episode: usize) -> Self {
        Self {
            reader,
            writer,
            arms,
            turns_per_episode,
            episode: 0,
            turn: 0,
            done: false,
        }
    }

    pub fn into_parts(self) -> (R, W) {
        (self.reader, self.writer)
    }

    fn exchange(&mut self, req: &StepRequest) -> Result<StepResponse, EnvError> {
        let mut line = serde_json::to_string(req).map_err(|e| EnvError::Remote(e.to_string()))?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| EnvError::Remote(format!("write: {e}")))?;
        let mut reply = String::new();
        let n = self
            .reader
            .read_line(&mut reply)
            .map_err(|e| EnvError::Remote(format!("read: {e}")))?;
        if n == 0 {
            return Err(EnvError::Remote("connection closed".into()));
        }
        let resp: StepResponse =
            serde_json::from_str(reply.trim()).map_err(|e| EnvError::Remote(format!("bad response: {e}")))?;
        if resp.version != PROTOCOL_VERSION {
            return Err(EnvError::Remote(format!(
                "protocol version {} (expected {PROTOCOL_VERSION})",
                resp.version
            )));
        }
        Ok(resp)
    }
}

impl<R: BufRead, W: Write> SocialEnvironment for RemoteEnvironment<R, W> {
    fn arms(&self) -> usize {
        self.arms
    }

    fn turns_per_episode(&self) -> usize {
        self.turns_per_episode
    }

    fn turn(&self) -> usize {
        self.turn
    }

    fn step_with_persona(
        &mut self,
        agent_arm: Option<usize>,
        opponent_arm: Option<usize>,
        persona_text: &str,
    ) -> Result<TurnRecord, EnvError> {
        if self.done || self.turn >= self.turns_per_episode {
            return Err(EnvError::EpisodeExhausted { turns: self.turn });
        }
        if let Some(a) = agent_arm.filter(|&a| a >= self.arms) {
            return Err(EnvError::ArmOutOfRange { arm: a, arms: self.arms });
        }
        let req = StepRequest {
            kind: "step".into(),
            version: PROTOCOL_VERSION,
            episode_id: format!("e{}", self.episode),
            turn: self.turn + 1,
            agent_arm,
            augmented_persona_text: persona_text.to_string(),
        };
        let resp = self.exchange(&req)?;
        let raw_dims: RawDims = resp
            .raw_dims
            .as_slice()
            .try_into()
            .map_err(|_| EnvError::Remote(format!("expected 7 raw dims, got {}", resp.raw_dims.len())))?;
        let reward = normalize_reward(&raw_dims)?;
        self.turn += 1;
        self.done = resp.done;
        Ok(TurnRecord {
            turn: self.turn,
            agent_arm,
            opponent_arm,
            agent_utterance: agent_utterance(agent_arm),
            opponent_utterance: resp.opponent_utterance,
            raw_dims,
            reward,
            opponent_raw_dims: None,
            opponent_reward: None,
        })
    }

    fn expected_rewards(&self) -> Option<Vec<f64>> {
        None
    }

    fn new_episode(&mut self) -> Result<(), EnvError> {
        self.episode += 1;
        self.turn = 0;
        self.done = false;
        Ok(())
    }
}
