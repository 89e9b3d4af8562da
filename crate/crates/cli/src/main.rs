use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use atlas_cli::auth::TokenStore;
use atlas_cli::jobs::{export_to, parse_where, QuerySource};
use atlas_cli::server::{router, AppState};
use atlas_core::crawler::{crawl, detect_layout, LayoutOptions, DEFAULT_MAX_DEPTH};
use atlas_core::export::{ExportError, ExportFormat};
use atlas_core::ingest::{ingest_dataset, IngestOptions, DEFAULT_LFN_PREFIX};
use atlas_core::model::DataSet;
use atlas_core::naming::{builtin_registry, classify_auxiliary, parse_scan_filename};
use atlas_core::pipeline::{PipelineCatalog, PipelineFilter};
use atlas_core::query::{FilterExpression, PredefinedParams, ResultPage, DEFAULT_PAGE_SIZE};
use atlas_core::synth::{generate, SynthSpec};
use atlas_core::{QueryEngine, Store};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "atlas",
    version,
    about = "Catalog, query and export neuroimaging datasets"
)]
struct Cli {
    /// Catalog database file.
    #[arg(long, global = true, env = "ATLAS_DB_PATH", default_value = "atlas.db")]
    db: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crawl a dataset directory and index its images and clinical data.
    Ingest {
        root: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        category: String,
        #[arg(long, default_value = "")]
        owner: String,
        /// Replace an existing dataset of the same name.
        #[arg(long)]
        replace: bool,
        #[arg(long, env = "ATLAS_LFN_PREFIX", default_value = DEFAULT_LFN_PREFIX)]
        lfn_prefix: String,
    },
    /// Manage the pipeline catalog.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// List datasets grouped by category.
    Datasets,
    /// Check referential integrity of the catalog; exits 1 on violations.
    Integrity,
    /// Show a variable's data-dictionary entry.
    Dictionary {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        variable: String,
    },
    /// Filter a dataset's image files by clinical variables.
    Query {
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        page: PageArgs,
        /// Print the self-contained SQL instead of running it.
        #[arg(long)]
        sql: bool,
    },
    /// Run hand-written read-only SQL in the sandbox.
    Sql {
        query: String,
        #[command(flatten)]
        page: PageArgs,
    },
    /// Run a predefined query.
    Predefined {
        query_id: String,
        #[arg(long)]
        needle: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[command(flatten)]
        page: PageArgs,
    },
    /// Export the full result of a filter or a sandboxed SQL query.
    Export {
        #[arg(long, default_value = "xml")]
        format: ExportFormat,
        #[command(flatten)]
        filter: OptionalFilterArgs,
        /// Export a sandboxed SQL query instead of a filter.
        #[arg(long, conflicts_with_all = ["dataset", "where_"])]
        sql: Option<String>,
        /// Output file; standard output when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long, env = "ATLAS_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: std::net::IpAddr,
        /// JSON token file.
        #[arg(long, env = "ATLAS_TOKEN_FILE")]
        tokens: PathBuf,
        #[arg(long, env = "ATLAS_LFN_PREFIX", default_value = DEFAULT_LFN_PREFIX)]
        lfn_prefix: String,
    },
    /// Generate a synthetic dataset tree from a JSON spec.
    Synth { spec: PathBuf, outdir: PathBuf },
    /// Walk a dataset directory and report its layout.
    Crawl {
        root: PathBuf,
        /// Print the layout and the full tree as JSON.
        #[arg(long)]
        json: bool,
        #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
        max_depth: usize,
    },
    /// Parse scan filenames with the built-in conventions.
    ParseName {
        #[arg(required = true)]
        names: Vec<String>,
    },
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Index a JSON pipeline descriptor.
    Add { file: PathBuf },
    /// List indexed pipelines.
    List {
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        owner: Option<String>,
    },
    /// List the algorithms of a pipeline.
    Algorithms { id: i64 },
}

#[derive(Args)]
struct FilterArgs {
    /// Dataset name or id.
    #[arg(long)]
    dataset: String,
    /// Restrict variables to one sub-dataset (assessment type).
    #[arg(long)]
    assessment: Option<String>,
    /// Predicate such as `maritalstatus=2`, `age<30`, `race:NOT_IN:1,2`; prefix `|` for OR.
    #[arg(long = "where", value_name = "PREDICATE")]
    where_: Vec<String>,
}

#[derive(Args)]
struct OptionalFilterArgs {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    assessment: Option<String>,
    #[arg(long = "where", value_name = "PREDICATE")]
    where_: Vec<String>,
}

#[derive(Args)]
struct PageArgs {
    #[arg(long, default_value_t = 0)]
    page: u32,
    #[arg(long, default_value_t = DEFAULT_PAGE_SIZE)]
    page_size: u32,
    /// Print the result page as JSON.
    #[arg(long)]
    json: bool,
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        if is_broken_pipe(&e) {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// A closed stdout (`atlas ... | head`) is not an error worth reporting.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c
            .downcast_ref::<io::Error>()
            .or(match c.downcast_ref::<ExportError>() {
                Some(ExportError::Io(io)) => Some(io),
                _ => None,
            });
        io.is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn open_store(path: &Path) -> Result<Arc<Store>> {
    Ok(Arc::new(
        Store::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn resolve_dataset(engine: &QueryEngine, key: &str) -> Result<DataSet> {
    Ok(match key.parse::<i64>() {
        Ok(id) => engine.dataset(id)?,
        Err(_) => engine.dataset_by_name(key)?,
    })
}

fn build_filter(
    engine: &QueryEngine,
    dataset: &str,
    assessment: Option<&str>,
    wheres: &[String],
) -> Result<FilterExpression> {
    let ds = resolve_dataset(engine, dataset)?;
    let mut f = FilterExpression::new(ds.id);
    if let Some(name) = assessment {
        let types = engine.list_subdatasets(ds.id)?;
        let t = types
            .iter()
            .find(|t| t.name == name)
            .with_context(|| format!("dataset `{}` has no sub-dataset `{name}`", ds.name))?;
        f.assessment_type_id = Some(t.id);
    }
    for w in wheres {
        f.predicates.push(parse_where(w)?);
    }
    Ok(f)
}

fn print_page(page: &ResultPage, as_json: bool) -> Result<()> {
    if as_json {
        return print_json(page);
    }
    let out = io::stdout();
    let mut out = BufWriter::new(out.lock());
    writeln!(out, "{}", page.columns.join("\t"))?;
    for r in &page.records {
        let cells: Vec<&str> = page
            .columns
            .iter()
            .map(|c| r.get(c).map_or("", String::as_str))
            .collect();
        writeln!(out, "{}", cells.join("\t"))?;
    }
    writeln!(out, "{}  ({:.1} ms)", page.banner(), page.elapsed_ms)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            root,
            dataset,
            category,
            owner,
            replace,
            lfn_prefix,
        } => {
            let store = open_store(&cli.db)?;
            let mut opts = IngestOptions::new(dataset, category);
            opts.owner = owner;
            opts.replace = replace;
            opts.lfn_prefix = lfn_prefix;
            let report = ingest_dataset(&store, &root, &opts)?;
            print_json(&report)
        }
        Command::Pipeline(cmd) => {
            let store = open_store(&cli.db)?;
            let catalog = PipelineCatalog::new(&store);
            match cmd {
                PipelineCommand::Add { file } => {
                    let id = catalog.index_file(&file)?;
                    print_json(&json!({ "id": id }))
                }
                PipelineCommand::List { name, owner } => print_json(
                    &catalog
                        .list_pipelines(&PipelineFilter { name, owner }, 0, u64::MAX / 2)?
                        .items,
                ),
                PipelineCommand::Algorithms { id } => print_json(&catalog.algorithms_of(id)?),
            }
        }
        Command::Datasets => {
            let engine = QueryEngine::new(open_store(&cli.db)?);
            print_json(&engine.list_datasets()?)
        }
        Command::Integrity => {
            let store = open_store(&cli.db)?;
            let report = store.validate_integrity()?;
            print_json(&report)?;
            if !report.is_clean() {
                bail!("{} integrity violations", report.violation_count());
            }
            Ok(())
        }
        Command::Dictionary { dataset, variable } => {
            let engine = QueryEngine::new(open_store(&cli.db)?);
            let ds = resolve_dataset(&engine, &dataset)?;
            print_json(&engine.variable_metadata_by_name(ds.id, &variable)?)
        }
        Command::Query { filter, page, sql } => {
            let engine = QueryEngine::new(open_store(&cli.db)?);
            let f = build_filter(
                &engine,
                &filter.dataset,
                filter.assessment.as_deref(),
                &filter.where_,
            )?;
            if sql {
                writeln!(io::stdout(), "{}", engine.copy_sql(&f)?)?;
                return Ok(());
            }
            print_page(&engine.query(&f, page.page, page.page_size)?, page.json)
        }
        Command::Sql { query, page } => {
            let engine = QueryEngine::new(open_store(&cli.db)?);
            print_page(
                &engine.sandbox_execute(&query, page.page, page.page_size)?,
                page.json,
            )
        }
        Command::Predefined {
            query_id,
            needle,
            dataset,
            page,
        } => {
            let engine = QueryEngine::new(open_store(&cli.db)?);
            let dataset_id = match dataset {
                Some(d) => Some(resolve_dataset(&engine, &d)?.id),
                None => None,
            };
            let params = PredefinedParams { needle, dataset_id };
            print_page(
                &engine.run_predefined(&query_id, &params, page.page, page.page_size)?,
                page.json,
            )
        }
        Command::Export {
            format,
            filter,
            sql,
            out,
        } => {
            let engine = QueryEngine::new(open_store(&cli.db)?);
            let source = match (sql, filter.dataset) {
                (Some(sql), _) => QuerySource::Sql { sql },
                (None, Some(ds)) => {
                    let f =
                        build_filter(&engine, &ds, filter.assessment.as_deref(), &filter.where_)?;
                    QuerySource::Compiled(engine.compile_filter(&f)?)
                }
                (None, None) => bail!("export needs --dataset (with optional --where) or --sql"),
            };
            let count = match out {
                Some(path) => {
                    let file = File::create(&path)
                        .with_context(|| format!("creating {}", path.display()))?;
                    let (w, n) = export_to(&engine, &source, format, BufWriter::new(file))?;
                    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
                    n
                }
                None => {
                    let stdout = io::stdout();
                    let (mut w, n) =
                        export_to(&engine, &source, format, BufWriter::new(stdout.lock()))?;
                    w.flush()?;
                    n
                }
            };
            eprintln!("exported {count} records");
            Ok(())
        }
        Command::Serve {
            port,
            bind,
            tokens,
            lfn_prefix,
        } => {
            let store = open_store(&cli.db)?;
            let auth = TokenStore::load(&tokens)?;
            if auth.is_empty() {
                bail!("token file {} lists no tokens", tokens.display());
            }
            let state = Arc::new(AppState::new(store, Arc::new(auth)).with_lfn_prefix(lfn_prefix));
            let addr = SocketAddr::new(bind, port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok(())
            })
        }
        Command::Synth { spec, outdir } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let spec: SynthSpec = serde_json::from_str(&text).context("invalid synth spec")?;
            let manifest = generate(&spec, &outdir)?;
            print_json(&json!({
                "dataset_name": manifest.dataset_name,
                "outdir": outdir,
                "counts": manifest.counts,
            }))
        }
        Command::Crawl {
            root,
            json,
            max_depth,
        } => {
            let tree = crawl(&root, max_depth)?;
            let layout = detect_layout(&tree, LayoutOptions::default());
            if json {
                let layout = match &layout {
                    Ok(l) => serde_json::to_value(l)?,
                    Err(e) => json!({ "error": e.to_string() }),
                };
                return print_json(&json!({ "layout": layout, "tree": tree }));
            }
            let mut out = io::stdout().lock();
            writeln!(
                out,
                "{} nodes, {} files",
                tree.node_count(),
                tree.root.file_count()
            )?;
            match layout {
                Ok(l) => writeln!(
                    out,
                    "sub_levels: {} (clinical: {}, images: {})",
                    l.sub_levels, l.clinical_dir, l.images_dir
                )?,
                Err(e) => writeln!(out, "layout: {e}")?,
            }
            Ok(())
        }
        Command::ParseName { names } => {
            let registry = builtin_registry();
            let parsed: Vec<_> = names
                .iter()
                .map(|name| {
                    let hit = registry.iter().find_map(|c| {
                        parse_scan_filename(name, c)
                            .ok()
                            .map(|t| (c.name.clone(), t))
                    });
                    json!({
                        "name": name,
                        "kind": classify_auxiliary(name, &registry),
                        "convention": hit.as_ref().map(|(c, _)| c),
                        "tokens": hit.map(|(_, t)| t),
                    })
                })
                .collect();
            print_json(&parsed)
        }
    }
}
