fn main() {
    std::process::exit(scene_elab_cli::dispatch(std::env::args()));
}
