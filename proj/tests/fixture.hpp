#pragma once

#include "stx/ingest.hpp"
#include "stx/pipeline.hpp"

namespace stx::testing {

struct FixtureRun {
    pipeline::SynthSummary synth;
    ingest::Dataset raw;
    pipeline::FilterOutcome filtered;
    patches::PatchStore store;
};

// synth-fixture -> ingest -> filter -> extract, in process.
inline FixtureRun run_fixture(const std::filesystem::path& dir, const pipeline::SynthConfig& cfg,
                              pipeline::FilterOptions opts) {
    FixtureRun r;
    r.synth = pipeline::synth_fixture(cfg, dir);
    r.raw = ingest::assemble_dataset(ingest::load_manifest(r.synth.manifest), ingest::Orientation::GenesAsRows).dataset;
    r.filtered = pipeline::filter_and_split(r.raw, opts);
    r.store = pipeline::extract_store(r.filtered.filtered, dir / "images", patches::PatchConfig{}).store;
    return r;
}

}  // namespace stx::testing
