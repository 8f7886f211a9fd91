fn main() {
    // die quietly when the output pipe closes (e.g. piping into `head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(tresca2d::cli::run_cli(std::env::args_os()));
}
