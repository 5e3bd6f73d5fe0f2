//! Holds the acceptance suite: `cargo test -p foldedit-suite --test acceptance`.
//! Set `ACCEPTANCE_ONLY=N` to run a single criterion.
