fn main() {
    std::process::exit(vqa_anomaly::cli::dispatch(std::env::args_os()));
}
