//! `gridforge`: submit and follow requests, download results and administer
//! rooms, clients, domains, processes and shared files.
//!
//! Exit codes: 0 ok, 1 transport, 2 validation (also unknown ids and
//! conflicts), 3 unauthorized or forbidden, 4 not ready.

mod config;
mod exit;
mod render;

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use gridforge_client::ApiClient;
use gridforge_core::validate::ParameterInput;
use gridforge_core::wire::{CreateDomain, CreateProcess, CreateRoom};
use gridforge_core::{
    DomainId, DomainOrigin, PayloadKind, RequestForm, RequestId, RequestStatus, RoomId, RunId, Visibility,
};

use config::{CliConfig, CONFIG_ENV, TOKEN_ENV, URL_ENV};
use exit::Failure;
use render::Table;

#[derive(Parser)]
#[command(name = "gridforge", version, about = "Command-line client for a gridforge manager")]
struct Cli {
    /// Config file (TOML with url, token, room, output_dir).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = URL_ENV)]
    url: Option<String>,
    #[arg(long, global = true, env = TOKEN_ENV, hide_env_values = true)]
    token: Option<String>,
    /// Tab-separated records without headers.
    #[arg(long, global = true)]
    porcelain: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Submit an execution request and print its id.
    Submit(SubmitArgs),
    /// List your requests.
    Requests,
    /// Show the run table of a request.
    Status {
        request: RequestId,
        /// Keep printing status lines until the request ends.
        #[arg(long)]
        watch: bool,
        #[arg(long, default_value_t = 2.0)]
        interval: f64,
    },
    /// Cancel a request; its active runs end as canceled.
    Cancel { request: RequestId },
    /// Download the aggregated output of a request.
    Download {
        request: RequestId,
        /// Destination directory (default: output_dir from config, else `.`).
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Accept a request that has not completed yet.
        #[arg(long)]
        partial: bool,
    },
    /// Per-run downloads.
    #[command(subcommand)]
    Runs(RunsCmd),
    #[command(subcommand)]
    Rooms(RoomsCmd),
    /// List clients with their availability and last resource reading.
    Clients,
    #[command(subcommand)]
    Domains(DomainsCmd),
    #[command(subcommand)]
    Processes(ProcessesCmd),
    #[command(subcommand)]
    Files(FilesCmd),
    /// Print the run-header snippet for a language (python, shell, r, java, c).
    Header { language: String },
}

#[derive(Args)]
struct SubmitArgs {
    #[arg(long)]
    domain: String,
    #[arg(long)]
    process: String,
    #[arg(long, short = 'n')]
    repetitions: i64,
    /// Start all ranks together behind a rendezvous barrier.
    #[arg(long)]
    parallel: bool,
    /// User parameter, repeatable; a single value may be comma-separated.
    #[arg(long = "param")]
    params: Vec<String>,
    #[arg(long)]
    gpu: bool,
    /// Place every rank on one client.
    #[arg(long)]
    same_machine: bool,
    /// Shared file by name or id, repeatable.
    #[arg(long = "file")]
    files: Vec<String>,
    /// Room by name or id, repeatable (default: room from config).
    #[arg(long = "room")]
    rooms: Vec<String>,
    #[arg(long)]
    watch: bool,
    #[arg(long, default_value_t = 2.0)]
    interval: f64,
}

#[derive(Subcommand)]
enum RunsCmd {
    /// Download the output archive of one run.
    Download {
        run: RunId,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RoomsCmd {
    List,
    Create {
        name: String,
        /// Only the owner and listed members may use it.
        #[arg(long)]
        restricted: bool,
        #[arg(long = "member")]
        members: Vec<String>,
    },
    /// Move a client into a room (admin).
    Assign { room: String, client: gridforge_core::ClientId },
}

#[derive(Subcommand)]
enum DomainsCmd {
    List {
        /// Only approved store domains.
        #[arg(long)]
        store: bool,
    },
    Create {
        #[arg(long)]
        name: String,
        /// Build recipe file.
        #[arg(long)]
        recipe: PathBuf,
        /// Dependency manifest file.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Entry command template; `{entry}` is the process entry file.
        #[arg(long)]
        template: String,
        /// Offer it in the store (approved at once when created by an admin).
        #[arg(long)]
        store: bool,
    },
    Approve { domain: DomainId },
}

#[derive(Subcommand)]
enum ProcessesCmd {
    List,
    Create {
        #[arg(long)]
        name: String,
        /// A single source file, or a .tar.gz with --archive.
        #[arg(long)]
        payload: PathBuf,
        #[arg(long)]
        archive: bool,
        /// Full entry command; otherwise derived from the domain template.
        #[arg(long)]
        entry_command: Option<String>,
        #[arg(long)]
        domain: Option<String>,
        /// Entry file inside an archive payload.
        #[arg(long)]
        entry_file: Option<String>,
    },
}

#[derive(Subcommand)]
enum FilesCmd {
    List,
    Upload {
        path: PathBuf,
        /// Name on the manager (default: the file name).
        #[arg(long)]
        name: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let code = match rt.block_on(run(cli)) {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("gridforge: {}", f.message);
            f.code
        }
    };
    std::process::exit(code);
}

fn load_config(cli: &Cli) -> Result<CliConfig, Failure> {
    let file = match &cli.config {
        Some(p) => CliConfig::load(p, true),
        None => match CliConfig::default_path() {
            Some(p) => CliConfig::load(&p, false),
            None => Ok(CliConfig::default()),
        },
    }
    .map_err(Failure::usage)?;
    Ok(file.overlay(cli.url.clone(), cli.token.clone()))
}

async fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Header { language } = &cli.command {
        let text = gridforge_core::snippets::for_language(language)
            .ok_or_else(|| Failure::usage(format!("no header snippet for {language:?}")))?;
        print!("{text}");
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let (url, token) = cfg.validate().map_err(Failure::usage)?;
    let api = ApiClient::new(url, token);
    let porcelain = cli.porcelain;
    let show = |t: Table| print!("{}", t.render(porcelain));

    match cli.command {
        Command::Header { .. } => unreachable!("handled above"),
        Command::Submit(a) => {
            let mut rooms = a.rooms.clone();
            if rooms.is_empty() {
                rooms.extend(cfg.room.clone());
            }
            let form = RequestForm {
                domain: a.domain,
                process: a.process,
                repetitions: a.repetitions,
                parallel: Some(a.parallel),
                parameters: Some(ParameterInput::List(a.params)),
                needs_gpu: Some(a.gpu),
                same_machine: Some(a.same_machine),
                shared_files: a.files,
                rooms,
            };
            let id = api.submit(&form).await?;
            println!("{id}");
            if a.watch {
                watch(&api, id, a.interval, porcelain).await?;
            }
        }
        Command::Requests => {
            let mut t = Table::new(&["id", "status", "done", "repetitions", "parallel", "created_ms"]);
            for v in api.requests().await? {
                let r = &v.request;
                t.row(vec![
                    r.request_id.to_string(),
                    r.status.to_string(),
                    v.succeeded.to_string(),
                    r.spec.repetitions.to_string(),
                    r.spec.parallel.to_string(),
                    r.created_at.to_string(),
                ]);
            }
            show(t);
        }
        Command::Status { request, watch: follow, interval } => {
            if follow {
                watch(&api, request, interval, porcelain).await?;
            }
            let table = api.runs(request).await?;
            show(render::runs_table(&table.runs));
        }
        Command::Cancel { request } => {
            let v = api.cancel(request).await?;
            println!("{}", render::watch_line(request, v.request.status, v.succeeded, v.request.spec.repetitions, porcelain));
        }
        Command::Download { request, dest, partial } => {
            let dest = dest.unwrap_or_else(|| cfg.output_dir());
            let bytes = api.request_bundle(request, partial).await?;
            let (archive, merged) = save_request_bundle(&dest, request, &bytes)?;
            if porcelain {
                println!("{}\t{}", archive.display(), merged.display());
            } else {
                println!("saved {} ({} bytes)", archive.display(), bytes.len());
                println!("merged console in {}", merged.display());
            }
        }
        Command::Runs(RunsCmd::Download { run, dest }) => {
            let dest = dest.unwrap_or_else(|| cfg.output_dir());
            let bytes = api.run_bundle(run).await?;
            std::fs::create_dir_all(&dest)?;
            let path = dest.join(format!("run-{run}.tar.gz"));
            std::fs::write(&path, &bytes)?;
            println!("{}", path.display());
        }
        Command::Rooms(cmd) => rooms(&api, cmd, porcelain).await?,
        Command::Clients => show(render::clients_table(&api.clients().await?)),
        Command::Domains(cmd) => domains(&api, cmd, porcelain).await?,
        Command::Processes(cmd) => processes(&api, cmd, porcelain).await?,
        Command::Files(FilesCmd::List) => {
            let mut t = Table::new(&["id", "name", "bytes", "sha256", "owner"]);
            for f in api.files().await? {
                t.row(vec![
                    f.file_id.to_string(),
                    f.name,
                    f.size_bytes.to_string(),
                    f.content_hash,
                    f.owner_user.to_string(),
                ]);
            }
            show(t);
        }
        Command::Files(FilesCmd::Upload { path, name }) => {
            let name = match name {
                Some(n) => n,
                None => file_name(&path)?,
            };
            let bytes = std::fs::read(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            println!("{}", api.upload_file(&name, bytes).await?);
        }
    }
    Ok(())
}

/// Polls until the request is terminal, printing a line on every change.
async fn watch(api: &ApiClient, id: RequestId, interval: f64, porcelain: bool) -> Result<(), Failure> {
    let period = Duration::from_secs_f64(interval.max(0.05));
    let mut last: Option<(RequestStatus, u32)> = None;
    loop {
        let v = api.request(id).await?;
        let now = (v.request.status, v.succeeded);
        if last != Some(now) {
            println!("{}", render::watch_line(id, now.0, now.1, v.request.spec.repetitions, porcelain));
            last = Some(now);
        }
        if now.0.is_terminal() {
            return Ok(());
        }
        tokio::time::sleep(period).await;
    }
}

fn save_request_bundle(dest: &Path, id: RequestId, bytes: &[u8]) -> Result<(PathBuf, PathBuf), Failure> {
    std::fs::create_dir_all(dest)?;
    let archive = dest.join(format!("request-{id}.tar.gz"));
    std::fs::write(&archive, bytes)?;
    let entries = gridforge_core::archive::read_entries(bytes)
        .map_err(|e| Failure { code: exit::TRANSPORT, message: format!("downloaded archive is unreadable: {e}") })?;
    let merged_name = gridforge_core::aggregate::MERGED_CONSOLE_FILE;
    let merged = entries
        .into_iter()
        .find(|(n, _)| n == merged_name)
        .map(|(_, b)| b)
        .unwrap_or_default();
    let merged_path = dest.join(format!("request-{id}-{merged_name}"));
    std::fs::write(&merged_path, merged)?;
    Ok((archive, merged_path))
}

fn file_name(path: &Path) -> Result<String, Failure> {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Failure::usage(format!("{} has no file name", path.display())))
}

async fn resolve_room(api: &ApiClient, key: &str) -> Result<RoomId, Failure> {
    if let Ok(id) = key.parse::<RoomId>() {
        return Ok(id);
    }
    api.rooms()
        .await?
        .into_iter()
        .find(|r| r.name == key)
        .map(|r| r.room_id)
        .ok_or_else(|| Failure::usage(format!("no room named {key:?}")))
}

async fn rooms(api: &ApiClient, cmd: RoomsCmd, porcelain: bool) -> Result<(), Failure> {
    match cmd {
        RoomsCmd::List => {
            let mut t = Table::new(&["id", "name", "owner", "visibility", "clients", "members"]);
            for r in api.rooms().await? {
                let ids = |it: Vec<String>| if it.is_empty() { "-".to_string() } else { it.join(",") };
                t.row(vec![
                    r.room_id.to_string(),
                    r.name,
                    r.owner_user.to_string(),
                    format!("{:?}", r.visibility),
                    ids(r.client_ids.iter().map(ToString::to_string).collect()),
                    ids(r.member_users.iter().map(ToString::to_string).collect()),
                ]);
            }
            print!("{}", t.render(porcelain));
        }
        RoomsCmd::Create { name, restricted, members } => {
            let id = api
                .create_room(&CreateRoom {
                    name,
                    visibility: if restricted { Visibility::Restricted } else { Visibility::Public },
                    members: members.into_iter().map(gridforge_core::UserId::new).collect(),
                })
                .await?;
            println!("{id}");
        }
        RoomsCmd::Assign { room, client } => {
            let room = resolve_room(api, &room).await?;
            let r = api.assign_client(room, client).await?;
            if porcelain {
                println!("{}\t{client}", r.room_id);
            } else {
                println!("client {client} is now in room {} ({})", r.room_id, r.name);
            }
        }
    }
    Ok(())
}

async fn domains(api: &ApiClient, cmd: DomainsCmd, porcelain: bool) -> Result<(), Failure> {
    match cmd {
        DomainsCmd::List { store } => {
            let list = if store { api.store_domains().await? } else { api.domains().await? };
            let mut t = Table::new(&["id", "name", "owner", "origin", "approved", "template", "hash"]);
            for d in list {
                t.row(vec![
                    d.domain_id.to_string(),
                    d.name,
                    d.owner_user.to_string(),
                    format!("{:?}", d.origin),
                    d.approved.to_string(),
                    d.entry_template,
                    d.content_hash.chars().take(12).collect(),
                ]);
            }
            print!("{}", t.render(porcelain));
        }
        DomainsCmd::Create { name, recipe, manifest, template, store } => {
            let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())));
            let body = CreateDomain {
                name,
                build_recipe: read(&recipe)?,
                dependency_manifest: match &manifest {
                    Some(m) => read(m)?,
                    None => String::new(),
                },
                entry_template: template,
                origin: if store { DomainOrigin::Store } else { DomainOrigin::User },
            };
            println!("{}", api.create_domain(&body).await?);
        }
        DomainsCmd::Approve { domain } => {
            let d = api.approve_domain(domain).await?;
            println!("{}", d.domain_id);
        }
    }
    Ok(())
}

async fn processes(api: &ApiClient, cmd: ProcessesCmd, porcelain: bool) -> Result<(), Failure> {
    match cmd {
        ProcessesCmd::List => {
            let mut t = Table::new(&["id", "name", "owner", "kind", "entry_command", "files"]);
            for p in api.processes().await? {
                t.row(vec![
                    p.process_id.to_string(),
                    p.name,
                    p.owner_user.to_string(),
                    format!("{:?}", p.payload_kind),
                    p.entry_command,
                    p.payload_files.join(","),
                ]);
            }
            print!("{}", t.render(porcelain));
        }
        ProcessesCmd::Create { name, payload, archive, entry_command, domain, entry_file } => {
            let bytes = std::fs::read(&payload).map_err(|e| Failure::usage(format!("{}: {e}", payload.display())))?;
            let body = CreateProcess {
                name,
                payload_kind: if archive { PayloadKind::Archive } else { PayloadKind::SingleFile },
                payload: bytes,
                file_name: if archive { None } else { Some(file_name(&payload)?) },
                entry_command,
                domain,
                entry_file,
            };
            println!("{}", api.create_process(&body).await?);
        }
    }
    Ok(())
}
