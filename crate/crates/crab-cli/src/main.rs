use std::io::{BufReader, IsTerminal};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crab::{Agent, AgentConfig};
use crab_cli::engine_setup::{build_engine, EngineArgs};
use crab_cli::repl::{run_repl, ReplOptions, RoundMode};
use crab_cli::service::{shared_engine, ChatService, ServiceConfig};

#[derive(Parser)]
#[command(name = "crab", version, about = "Chat with language models from the terminal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Interactive terminal chat.
    Repl(ReplArgs),
    /// Host conversations over WebSocket at /chat.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ReplArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Stop after this many user turns.
    #[arg(long)]
    rounds: Option<u64>,
    /// chat for text-only turns, full for function calling.
    #[arg(long, value_enum, default_value_t = RoundMode::Chat)]
    mode: RoundMode,
    /// Save the conversation transcript here on exit.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value = "127.0.0.1:8787")]
    bind: SocketAddr,
    #[arg(long, value_enum, default_value_t = RoundMode::Chat)]
    mode: RoundMode,
    #[arg(long, default_value_t = 64)]
    max_connections: usize,
    /// Close connections idle for this many seconds.
    #[arg(long, default_value_t = 300)]
    idle_timeout_secs: u64,
}

async fn repl_command(args: ReplArgs) -> anyhow::Result<()> {
    let engine = build_engine(&args.engine)?;
    let config = AgentConfig {
        system_prompt: args.engine.system.clone(),
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(engine, config)?;
    let stdin = std::io::stdin();
    let opts = ReplOptions {
        rounds: args.rounds,
        mode: args.mode,
        transcript_out: args.save,
        echo_input: !stdin.is_terminal(),
    };
    run_repl(&mut agent, &opts, BufReader::new(stdin.lock()), std::io::stdout()).await?;
    Ok(())
}

async fn serve_command(args: ServeArgs) -> anyhow::Result<()> {
    let engine = build_engine(&args.engine)?;
    let mut config = ServiceConfig::new(args.bind, shared_engine(engine));
    config.system_prompt = args.engine.system.clone();
    config.mode = args.mode;
    config.max_connections = args.max_connections;
    config.idle_timeout = Duration::from_secs(args.idle_timeout_secs);
    let service = ChatService::bind(config).await?;
    eprintln!("listening on ws://{}/chat", service.local_addr()?);
    service
        .serve(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Repl(args) => repl_command(args).await,
        Command::Serve(args) => serve_command(args).await,
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
