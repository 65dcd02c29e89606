//! Command-line entry point; see `tdnnf-nas --help`.

fn main() {
    std::process::exit(tdnnf_nas::cli::run(std::env::args_os()));
}
