fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Caps inference and metric workers too, not only the training prefetch pool.
    if std::env::var_os(jobvs::training::NUM_WORKERS_ENV).is_some() {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobvs::training::num_workers())
            .build_global();
    }
    std::process::exit(jobvs::cli::run(std::env::args_os()));
}
