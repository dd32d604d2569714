use diffbridge::cli;

fn main() {
    std::process::exit(cli::run());
}
