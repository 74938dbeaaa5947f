fn main() {
    std::process::exit(lsv_calib::cli::dispatch(std::env::args_os()));
}
