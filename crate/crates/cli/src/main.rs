use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use wpnmine::clustering::cluster_matrix;
use wpnmine::clustering::sorted_clusterable;
use wpnmine::config::Config;
use wpnmine::embeddings::{TermSimilarity, Vocabulary};
use wpnmine::filterlist::FilterList;
use wpnmine::ingest::{load_dataset, Dataset};
use wpnmine::labels::LabelState;
use wpnmine::pipeline::{
    clustering_artifact, dedup_dataset, embed, gather_verdicts, label_clusters, label_metaclusters, load_inputs,
    load_psl, read_filter_list, read_json, run_pipeline, verdict_providers, write_json, ClusteringArtifact, MetaArtifact, RunDir,
};
use wpnmine::similarity::distance_matrix_for;
use wpnmine::synth::{generate_synthetic, CampaignPlan};
use wpnmine::verdicts::{rescan, SystemClock, VerdictProvider, VerdictSnapshot};
use wpnmine::{DistanceMatrix, Error};

/// Mine web push notification logs for ad campaigns and malicious messages.
#[derive(Parser)]
#[command(name = "wpnmine", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input JSONL file; repeatable.
    #[arg(long, global = true)]
    input: Vec<PathBuf>,
    /// Run directory (for `synth`, the output JSONL file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted campaigns.
    Synth {
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[arg(long, default_value_t = 1)]
        noise: usize,
    },
    /// Load and deduplicate the input into the run directory.
    Ingest,
    /// Train word embeddings and the term-similarity matrix.
    Embed,
    /// Compute distances and cluster.
    Cluster,
    /// Collect verdicts and apply cluster-level labels.
    Label,
    /// Build meta-clusters and apply their labels.
    Meta,
    /// Re-query verdicts for every landing URL and report what changed.
    Rescan,
    /// Check service-worker URLs against an Adblock filter list.
    Filtercheck {
        /// Filter list, plain or gzip.
        #[arg(long)]
        list: PathBuf,
        /// Check one URL instead of the dataset.
        #[arg(long)]
        url: Option<String>,
        /// Page host for `$domain=` rules when checking one URL.
        #[arg(long)]
        context: Option<String>,
    },
    /// Run every stage and print the report.
    Report {
        #[arg(long)]
        json: bool,
    },
    /// Serve the review API over a finished run directory.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// UI bundle served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Verdict journal; defaults to `journal.jsonl` in the run directory.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
}

fn resolve_config(c: &Common) -> Result<Config, Error> {
    let mut config = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if !c.input.is_empty() {
        config.inputs = c.input.clone();
    }
    if let Some(out) = &c.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable output"));
}

fn run_dataset(dir: &RunDir, config: &Config) -> Result<Dataset, Error> {
    load_dataset(&[dir.dataset()], &load_psl(config)?)
}

fn execute(cli: Cli) -> Result<(), Error> {
    let config = resolve_config(&cli.common)?;
    let dir = RunDir::new(&config.out_dir);
    let hash = config.hash();
    match cli.command {
        Command::Synth { scale, noise } => {
            let out = cli
                .common
                .out
                .ok_or_else(|| Error::Param("synth needs --out <file.jsonl>".into()))?;
            let corpus = generate_synthetic(&CampaignPlan::reference(scale, noise, config.seed))?;
            corpus.dataset.write_jsonl(&out)?;
            let truth = out.with_extension("truth.json");
            let text = serde_json::to_string_pretty(&corpus.truth).expect("truth serializes");
            std::fs::write(&truth, text).map_err(|e| Error::Io { path: truth, source: e })?;
            println!("wrote {} records to {}", corpus.dataset.len(), out.display());
        }
        Command::Ingest => {
            let psl = load_psl(&config)?;
            let (dataset, removed) = dedup_dataset(load_inputs(&config, &psl)?);
            ensure_dir(&dir.root)?;
            dataset.write_jsonl(&dir.dataset())?;
            std::fs::write(dir.config(), config.to_text()).map_err(|e| Error::Io {
                path: dir.config(),
                source: e,
            })?;
            let s = dataset.summary();
            println!("records {}  with landing page {}  duplicates removed {removed}", s.total, s.clusterable);
        }
        Command::Embed => {
            let dataset = run_dataset(&dir, &config)?;
            let e = embed(&dataset, &config)?;
            std::fs::write(dir.embeddings(), e.embeddings.to_text()).map_err(|err| Error::Io {
                path: dir.embeddings(),
                source: err,
            })?;
            std::fs::write(dir.term_similarity(), e.similarity.to_text()).map_err(|err| Error::Io {
                path: dir.term_similarity(),
                source: err,
            })?;
            println!("vocabulary {}  similar term pairs {}", e.vocab.len(), e.similarity.nnz() / 2);
        }
        Command::Cluster => {
            let psl = load_psl(&config)?;
            let dataset = run_dataset(&dir, &config)?;
            let vocab = Vocabulary::from_dataset(&dataset, config.min_count)?;
            let text = std::fs::read_to_string(dir.term_similarity()).map_err(|e| Error::Io {
                path: dir.term_similarity(),
                source: e,
            })?;
            let sim = TermSimilarity::<f64>::from_text(&text)?;
            let records = sorted_clusterable(&dataset);
            let matrix: DistanceMatrix = distance_matrix_for(&records, &vocab, &sim, config.cluster.weights)?;
            matrix.save(&dir.distances())?;
            let run = cluster_matrix(&records, matrix, &config.cluster, &psl)?;
            write_json(&dir.clustering(), &hash, &clustering_artifact(&run))?;
            let singletons = run.clusters.iter().filter(|c| c.is_singleton()).count();
            println!(
                "k {}  silhouette {:.4}  clusters {}  singletons {singletons}",
                run.selection.k,
                run.selection.score,
                run.clusters.len()
            );
        }
        Command::Label => {
            let dataset = run_dataset(&dir, &config)?;
            let clustering: ClusteringArtifact = read_json(&dir.clustering())?.data;
            let verdicts = gather_verdicts(&dataset, &config)?;
            write_json(&dir.verdicts(), &hash, &verdicts)?;
            let state = label_clusters(&dataset, &clustering.clusters, &verdicts);
            write_json(&dir.labels(), &hash, &state)?;
            print_json(&label_counts(&state));
        }
        Command::Meta => {
            let psl = load_psl(&config)?;
            let clustering: ClusteringArtifact = read_json(&dir.clustering())?.data;
            let verdicts: VerdictSnapshot = read_json(&dir.verdicts())?.data;
            let mut state: LabelState = read_json(&dir.labels())?.data;
            let (graph, metas) =
                label_metaclusters(&clustering.clusters, &mut state, &verdicts, &psl, config.suspicion);
            write_json(&dir.labels(), &hash, &state)?;
            let artifact = MetaArtifact {
                graph: graph.export(),
                metaclusters: metas,
            };
            write_json(&dir.meta(), &hash, &artifact)?;
            println!("meta-clusters {}", artifact.metaclusters.len());
            print_json(&label_counts(&state));
        }
        Command::Rescan => {
            let dataset = run_dataset(&dir, &config)?;
            let prior: VerdictSnapshot = read_json(&dir.verdicts())?.data;
            let boxed = verdict_providers(&config)?;
            if boxed.is_empty() {
                return Err(Error::Param("rescan needs at least one verdict provider in the config".into()));
            }
            let refs: Vec<&dyn VerdictProvider> = boxed.iter().map(|b| b.as_ref()).collect();
            let urls = dataset.records.iter().filter_map(|r| r.landing_url.as_deref());
            let (report, next) = rescan(urls, &refs, &prior, &SystemClock)?;
            write_json(&dir.verdicts(), &hash, &next)?;
            print_json(&report);
        }
        Command::Filtercheck { list, url, context } => {
            let list = FilterList::parse(&read_filter_list(&list)?);
            match url {
                Some(u) => {
                    let d = list
                        .match_url(&u, context.as_deref())
                        .map_err(|e| Error::Param(format!("cannot parse `{u}`: {e}")))?;
                    print_json(&d);
                }
                None => {
                    let psl = load_psl(&config)?;
                    let dataset = if dir.dataset().exists() {
                        run_dataset(&dir, &config)?
                    } else {
                        load_inputs(&config, &psl)?
                    };
                    let audit = wpnmine::filterlist::audit_dataset(&dataset, &list);
                    print!("{}", audit.to_table());
                    print_json(&list.report());
                }
            }
        }
        Command::Report { json } => {
            let out = run_pipeline(&config)?;
            if json {
                print_json(&out.report);
            } else {
                print!("{}", out.report.to_table());
            }
        }
        Command::Serve {
            addr,
            static_dir,
            journal,
        } => {
            let artifacts = wpnmine_triage::Artifacts::load(&dir.root).map_err(triage_error)?;
            let journal = journal.unwrap_or_else(|| dir.root.join("journal.jsonl"));
            let session = wpnmine_triage::TriageSession::new(artifacts, Some(journal), Arc::new(SystemClock))
                .map_err(triage_error)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Param(e.to_string()))?;
            eprintln!("serving {} on http://{addr}", dir.root.display());
            runtime
                .block_on(wpnmine_triage::serve(Arc::new(tokio::sync::RwLock::new(session)), addr, static_dir))
                .map_err(|e| Error::Param(format!("server: {e}")))?;
        }
    }
    Ok(())
}

fn triage_error(e: wpnmine_triage::TriageError) -> Error {
    match e {
        wpnmine_triage::TriageError::Core(e) => e,
        other => Error::Contract(other.to_string()),
    }
}

fn label_counts(state: &LabelState) -> serde_json::Value {
    use wpnmine::labels::{ClusterLabel, RecordLabel};
    serde_json::json!({
        "known_malicious": state.count_records(RecordLabel::KnownMalicious),
        "malicious": state.count_records(RecordLabel::Malicious),
        "suspicious": state.count_records(RecordLabel::Suspicious),
        "ad": state.count_records(RecordLabel::Ad),
        "ad_campaigns": state.count_clusters(ClusterLabel::AdCampaign),
        "malicious_clusters": state.count_clusters(ClusterLabel::Malicious),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}
