//! Terminal chat loop over any engine/agent configuration.
//!
//! The loop reads one line per turn, runs a chat or full round, and renders
//! the round's events as they arrive: intermediate function calls show as
//! `AI: Thinking (name)...` progress lines, the final reply as
//! `AI: {content}`. With piped input (`echo_input`), sessions render
//! byte-deterministically, which is how the golden-transcript tests drive it.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use clap::ValueEnum;

use crab::{Agent, AgentHooks, RoundEvent};

/// Which round API drives each turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoundMode {
    /// Text-only turns; functions are never exposed.
    Chat,
    /// Full rounds with function calling.
    Full,
}

#[derive(Debug, Clone)]
pub struct ReplOptions {
    /// Bound on user turns consumed; unbounded when absent.
    pub rounds: Option<u64>,
    pub mode: RoundMode,
    /// Save the conversation transcript here on exit.
    pub transcript_out: Option<PathBuf>,
    /// Echo each input line after the prompt; used when stdin is not a
    /// terminal so the session renders as a complete transcript.
    pub echo_input: bool,
}

impl Default for ReplOptions {
    fn default() -> Self {
        Self {
            rounds: None,
            mode: RoundMode::Chat,
            transcript_out: None,
            echo_input: false,
        }
    }
}

fn render_event<W: Write>(event: &RoundEvent, out: &mut W) -> io::Result<()> {
    match event {
        RoundEvent::AssistantMessage(m) => match m.function_call() {
            Some(call) => writeln!(out, "AI: Thinking ({})...", call.name()),
            None => Ok(()),
        },
        RoundEvent::FunctionResult(_) => Ok(()),
        RoundEvent::FinalMessage(m) => writeln!(out, "AI: {}", m.content()),
    }
}

/// Runs the chat loop until EOF or the round bound, then optionally saves
/// the transcript. Engine errors are printed and the loop continues; only
/// I/O failures on the terminal itself abort.
pub async fn run_repl<H, R, W>(
    agent: &mut Agent<H>,
    opts: &ReplOptions,
    mut input: R,
    mut out: W,
) -> io::Result<()>
where
    H: AgentHooks,
    R: BufRead,
    W: Write + Send,
{
    let mut served = 0u64;
    loop {
        if opts.rounds.is_some_and(|bound| served >= bound) {
            break;
        }
        write!(out, "USER: ")?;
        out.flush()?;
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end_matches(['\r', '\n']);
        if opts.echo_input {
            writeln!(out, "{line}")?;
        }
        served += 1;
        match opts.mode {
            RoundMode::Chat => match agent.chat_round(line).await {
                Ok(reply) => writeln!(out, "AI: {}", reply.content())?,
                Err(err) => writeln!(out, "error: {err}")?,
            },
            RoundMode::Full => {
                let mut render_failure: Option<io::Error> = None;
                let round = agent
                    .full_round_with(line, |event| {
                        if render_failure.is_none() {
                            if let Err(e) = render_event(event, &mut out) {
                                render_failure = Some(e);
                            }
                        }
                    })
                    .await;
                if let Some(e) = render_failure {
                    return Err(e);
                }
                if let Err(err) = round {
                    writeln!(out, "error: {err}")?;
                }
            }
        }
        out.flush()?;
    }
    if let Some(path) = &opts.transcript_out {
        let file = std::fs::File::create(path)?;
        agent.save(file).map_err(io::Error::other)?;
    }
    Ok(())
}
