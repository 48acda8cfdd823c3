//! Domains the store ships with, approved and owned by the administrator.

use gridforge_core::wire::CreateDomain;
use gridforge_core::DomainOrigin;

fn requires(tool: &str) -> String {
    format!(
        "command -v {tool} >/dev/null 2>&1 || {{ echo \"{tool} is not available\" >&2; exit 1; }}\n"
    )
}

pub fn store_domains() -> Vec<CreateDomain> {
    let python = format!(
        "{}if [ -n \"$GRIDFORGE_REQUIREMENTS\" ]; then python3 -m pip install $GRIDFORGE_REQUIREMENTS; fi\n",
        requires("python3")
    );
    let cc = format!(
        "{}BIN=\"${{IMAGE_DIR:-/usr/local}}/bin\"\nmkdir -p \"$BIN\"\n\
         cat > \"$BIN/gridforge-cc-run\" <<'SH'\n#!/bin/sh\nsrc=\"$1\"; shift\n\
         case \"$src\" in *.c) cc -O2 -o ./app \"$src\" -lm ;; *) c++ -O2 -o ./app \"$src\" ;; esac || exit 1\n\
         exec ./app \"$@\"\nSH\nchmod +x \"$BIN/gridforge-cc-run\"\n",
        requires("cc")
    );
    let entries = [
        ("Simple Python", "FROM python:3.11-slim\n", python, "python3 {entry}"),
        ("Simple R", "FROM r-base:4.3.2\n", requires("Rscript"), "Rscript {entry}"),
        ("Java", "FROM eclipse-temurin:17-jre\n", requires("java"), "java -jar {entry}"),
        ("C/C++", "FROM gcc:13\n", cc, "gridforge-cc-run {entry}"),
        ("Shell", "FROM debian:bookworm-slim\n", requires("sh"), "sh {entry}"),
    ];
    entries
        .into_iter()
        .map(|(name, recipe, manifest, template)| CreateDomain {
            name: name.into(),
            build_recipe: recipe.into(),
            dependency_manifest: manifest,
            entry_template: template.into(),
            origin: DomainOrigin::Store,
        })
        .collect()
}
