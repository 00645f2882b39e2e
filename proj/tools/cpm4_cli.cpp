// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

// cpm4 command-line tool. Exit codes: 0 success, 2 usage error, 1 runtime error.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cpm4/bench.hpp"
#include "cpm4/io/atomic_file.hpp"
#include "cpm4/model.hpp"
#include "cpm4/mtp/head.hpp"
#include "cpm4/mtp/train.hpp"
#include "cpm4/niah.hpp"
#include "cpm4/quant/calibration.hpp"
#include "cpm4/quant/quantize_model.hpp"
#include "cpm4/spec/drafter.hpp"
#include "cpm4/spec/freq_vocab.hpp"
#include "cpm4/spec/generate.hpp"
#include "cpm4/spec/reduced_head.hpp"
#include "cpm4/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace cpm4;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Common {
    std::uint64_t seed = 0;
    std::string out = "out";
};

struct SparseFlags {
    bool sparse = false;
    sparse::SparseAttentionConfig cfg;
    bool approx_lse = false;

    void add(CLI::App* app, bool with_toggle) {
        if (with_toggle) app->add_flag("--sparse,!--dense", sparse, "Block-sparse attention (default dense)");
        app->add_option("--block-size", cfg.block_size, "Key-value block size")->check(CLI::PositiveNumber);
        app->add_option("--kernel-size", cfg.kernel_size, "Semantic kernel size")->check(CLI::PositiveNumber);
        app->add_option("--stride", cfg.kernel_stride, "Semantic kernel stride")->check(CLI::PositiveNumber);
        app->add_option("--coarse-stride", cfg.coarse_stride, "Coarse kernel stride for the LSE estimate")
            ->check(CLI::PositiveNumber);
        app->add_option("--topk", cfg.top_k, "Blocks selected per query group")->check(CLI::PositiveNumber);
        app->add_option("--init-blocks", cfg.n_init_blocks, "Forced initial blocks");
        app->add_option("--local-blocks", cfg.n_local_blocks, "Forced local blocks");
        app->add_flag("--approx-lse", approx_lse, "Normalize kernel scores with the coarse LSE estimate");
    }

    sparse::SparseAttentionConfig config() const {
        sparse::SparseAttentionConfig c = cfg;
        c.use_approx_lse = approx_lse;
        try {
            c.validate();
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
        return c;
    }
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--seed", c.seed, "Seed for every stochastic step");
    app->add_option("--out", c.out, "Output directory");
}

fs::path out_dir(const Common& c) {
    fs::create_directories(c.out);
    return fs::path(c.out);
}

void write(const fs::path& p, const std::string& s) { io::write_file_atomic(p, s); }

std::vector<int> read_corpus(const std::string& path) {
    if (!fs::exists(path)) throw IoError("corpus not found: " + path);
    const std::string text = io::read_file(path);
    if (text.empty()) throw PreconditionError("corpus is empty: " + path);
    return ByteTokenizer::encode(text, false);
}

std::string jsonl(const nlohmann::json& j) { return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n"; }

std::vector<int> specials_for(std::size_t vocab_size) {
    std::vector<int> s;
    if (vocab_size == ByteTokenizer::kVocabSize) s = ByteTokenizer::specials();
    return s;
}

// ---------------------------------------------------------------------------- init-model

struct InitArgs {
    Common common;
    std::size_t vocab_size = ByteTokenizer::kVocabSize;
    std::size_t layers = 4;
    std::size_t max_seq_len = 4096;
    bool mtp = false;
};

int cmd_init(const InitArgs& a) {
    ModelConfig c = ModelConfig::toy();
    c.vocab_size = a.vocab_size;
    c.n_layers = a.layers;
    c.max_seq_len = a.max_seq_len;
    try {
        c.validate();
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    std::mt19937_64 rng(a.common.seed);
    ModelBundle b = init_model(c, rng());
    if (a.mtp) mtp::init_head(b, rng());
    const fs::path p = out_dir(a.common) / "model.cpm4";
    save_model(b, p);
    std::cout << "wrote " << p.string() << " (" << b.tensors.size() << " tensors)\n";
    return 0;
}

// ------------------------------------------------------------------------------ generate

struct GenerateArgs {
    Common common;
    SparseFlags sparse;
    std::string model;
    std::string prompt = "The quick brown fox";
    std::size_t max_new = 32;
    double temperature = 0.0;
    bool spec = false;
    std::string drafter;
    std::string draft_model;
    std::string vocab;
    std::string corpus;
    double fraction = 0.25;
    std::size_t n_draft = 4;
    std::size_t tree_budget = 0;
    bool quant = false;
    std::size_t group_size = 128;
};

spec::FrequencyVocab draft_vocab(const GenerateArgs& a, std::size_t vocab_size) {
    if (!a.vocab.empty()) {
        auto v = spec::FrequencyVocab::load(a.vocab);
        if (v.vocab_size() != vocab_size) throw ValidationError("vocabulary size differs from the model's");
        return v;
    }
    if (!a.corpus.empty()) return spec::FrequencyVocab::build(read_corpus(a.corpus), vocab_size, a.fraction, specials_for(vocab_size));
    // No statistics: rank by id, which keeps the first ceil(fraction * |V|) ids.
    return spec::FrequencyVocab::from_counts(std::vector<std::uint64_t>(vocab_size, 1), a.fraction, specials_for(vocab_size));
}

int cmd_generate(const GenerateArgs& a) {
    if (!a.spec && (a.tree_budget > 0 || !a.drafter.empty() || !a.draft_model.empty()))
        throw UsageError("draft options require --spec");
    if (a.fraction <= 0.0 || a.fraction > 1.0) throw UsageError("--fraction must lie in (0, 1]");
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    ModelBundle b = load_model(a.model);
    if (a.quant) {
        for (const auto& name : quant::quantizable_names(b))
            b.tensors[name] = quant::dequantize(quant::quantize_rtn(b.tensor(name), a.group_size, 4));
    }
    const std::vector<int> prompt = ByteTokenizer::encode(a.prompt);
    for (int t : prompt)
        if (std::size_t(t) >= b.config.vocab_size) throw ValidationError("prompt token outside the model vocabulary");

    spec::GenerateParams gp;
    gp.max_new_tokens = a.max_new;
    gp.temperature = a.temperature;
    gp.seed = a.common.seed;
    gp.eos = b.config.vocab_size == ByteTokenizer::kVocabSize ? ByteTokenizer::kEos : -1;
    sparse::SparseStats stats;
    std::vector<sparse::SelectionTrace> traces;
    if (a.sparse.sparse) {
        gp.attention.mode = AttentionMode::Sparse;
        gp.attention.sparse = a.sparse.config();
        gp.attention.stats = &stats;
        gp.attention.traces = &traces;
    }

    spec::GenerateResult res;
    std::optional<ModelBundle> small;
    if (a.spec) {
        const auto vocab = draft_vocab(a, b.config.vocab_size);
        std::string kind = a.drafter;
        if (kind.empty()) kind = !a.draft_model.empty() ? "model" : (mtp::has_head(b) ? "mtp" : "self");
        std::unique_ptr<spec::Drafter> d;
        if (kind == "mtp") {
            if (!mtp::has_head(b)) throw ValidationError("model has no MTP head; use --drafter self or train one");
            d = std::make_unique<spec::MtpDrafter>(b, spec::ReducedHead::extract(b.lm_head(), vocab));
        } else if (kind == "self") {
            d = std::make_unique<spec::ModelDrafter>(b, spec::ReducedHead::extract(b.lm_head(), vocab));
        } else if (kind == "model") {
            if (a.draft_model.empty()) throw UsageError("--drafter model needs --draft-model");
            small = load_model(a.draft_model);
            if (small->config.vocab_size != b.config.vocab_size) throw ValidationError("draft model vocabulary differs");
            d = std::make_unique<spec::ModelDrafter>(*small, spec::ReducedHead::extract(small->lm_head(), vocab));
        } else {
            throw UsageError("--drafter must be one of mtp, self, model");
        }
        spec::DraftParams dp;
        dp.n_draft = a.n_draft;
        dp.tree_budget = a.tree_budget;
        res = spec::speculative_generate(b, *d, prompt, gp, dp);
    } else {
        res = spec::generate(b, prompt, gp);
    }
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();

    const fs::path dir = out_dir(a.common);
    nlohmann::json j{{"prompt_tokens", prompt},
                     {"tokens", res.tokens},
                     {"text", ByteTokenizer::decode(res.tokens)},
                     {"attention", a.sparse.sparse ? "sparse" : "dense"},
                     {"speculative", a.spec},
                     {"quantized", a.quant}};
    if (a.spec) {
        j["verify_calls"] = res.stats.verify_calls();
        j["mean_accepted"] = res.stats.mean_accepted();
        j["draft_head_macs"] = res.stats.draft_macs();
        j["full_head_macs"] = res.stats.full_macs();
        write(dir / "spec_stats.csv", res.stats.to_csv());
    }
    if (a.sparse.sparse) {
        j["stage1_touches"] = stats.stage1_touches;
        j["stage2_touches"] = stats.stage2_touches;
        j["dense_touches"] = stats.dense_touches;
        std::string lines;
        for (const auto& t : traces) lines += jsonl(sparse::to_json(t));
        write(dir / "traces.jsonl", lines);
    }
    write(dir / "generate.jsonl", jsonl(j));
    write(dir / "timings.csv", "phase,seconds\ngenerate," + std::to_string(secs) + "\n");
    std::cout << ByteTokenizer::decode(res.tokens) << "\n";
    if (a.spec)
        std::cout << "verify calls " << res.stats.verify_calls() << ", mean accepted " << res.stats.mean_accepted()
                  << "\n";
    return 0;
}

// ---------------------------------------------------------------------------- bench-attn

struct BenchArgs {
    Common common;
    SparseFlags sparse;
    std::vector<std::size_t> lengths{512, 2048, 8192};
};

int cmd_bench(const BenchArgs& a) {
    const auto b = bench::bench_attention(AttentionShape{4, 2, 16}, a.sparse.config(), a.lengths, a.common.seed);
    const fs::path dir = out_dir(a.common);
    write(dir / "bench_attn.csv", b.csv());
    write(dir / "timings.csv", b.timings_csv());
    std::string lines;
    for (const auto& t : b.traces) lines += jsonl(sparse::to_json(t));
    write(dir / "traces.jsonl", lines);
    std::cout << b.csv();
    return 0;
}

// --------------------------------------------------------------------------- build-vocab

struct VocabArgs {
    Common common;
    std::string corpus;
    double fraction = 0.25;
    std::size_t vocab_size = ByteTokenizer::kVocabSize;
    std::size_t zipf_length = 0;
    double zipf_exponent = 1.1;
};

int cmd_vocab(const VocabArgs& a) {
    if (a.corpus.empty() == (a.zipf_length == 0)) throw UsageError("give exactly one of --corpus and --zipf-length");
    if (a.fraction <= 0.0 || a.fraction > 1.0) throw UsageError("--fraction must lie in (0, 1]");
    std::vector<int> corpus;
    std::size_t vocab_size = a.vocab_size;
    if (!a.corpus.empty()) {
        corpus = read_corpus(a.corpus);
        vocab_size = ByteTokenizer::kVocabSize;
    } else {
        corpus = spec::zipf_corpus(vocab_size, a.zipf_length, a.zipf_exponent, a.common.seed);
    }
    const auto v = spec::FrequencyVocab::build(corpus, vocab_size, a.fraction, specials_for(vocab_size));
    const double cov = spec::coverage(v, corpus);
    const fs::path dir = out_dir(a.common);
    v.save(dir / "vocab.json");
    std::ostringstream os;
    os.precision(17);
    os << "vocab_size,subset_size,fraction,coverage\n" << v.vocab_size() << ',' << v.subset_size() << ',' << v.fraction()
       << ',' << cov << '\n';
    write(dir / "vocab_report.csv", os.str());
    std::cout << "subset " << v.subset_size() << " of " << v.vocab_size() << ", coverage " << cov << "\n";
    return 0;
}

// ------------------------------------------------------------------------------ quantize

struct QuantArgs {
    Common common;
    std::string model;
    std::string corpus;
    std::size_t group_size = 128;
    std::size_t prefix_s = 4;
    int bits = 4;
    bool symmetric = false;
    std::size_t n_calib = 32;
    std::size_t seq_len = 64;
};

std::vector<std::vector<int>> calibration_sequences(const QuantArgs& a, const ModelConfig& c, std::mt19937_64& rng) {
    std::vector<std::vector<int>> seqs;
    if (!a.corpus.empty()) {
        const auto corpus = read_corpus(a.corpus);
        if (c.vocab_size < ByteTokenizer::kVocabSize) throw ValidationError("byte corpus needs a 259-token model");
        if (corpus.size() < a.seq_len) throw PreconditionError("corpus is shorter than --seq-len");
        std::uniform_int_distribution<std::size_t> start(0, corpus.size() - (a.seq_len - 1));
        for (std::size_t i = 0; i < a.n_calib; ++i) {
            std::vector<int> s{ByteTokenizer::kBos};
            const std::size_t at = start(rng);
            s.insert(s.end(), corpus.begin() + std::ptrdiff_t(at), corpus.begin() + std::ptrdiff_t(at + a.seq_len - 1));
            seqs.push_back(std::move(s));
        }
        return seqs;
    }
    for (std::size_t i = 0; i < a.n_calib; ++i) {
        std::vector<int> s(a.seq_len);
        for (int& t : s) t = int(rng() % c.vocab_size);
        seqs.push_back(std::move(s));
    }
    return seqs;
}

int cmd_quantize(const QuantArgs& a) {
    if (a.bits != 4 && a.bits != 8) throw UsageError("--bits must be 4 or 8");
    if (a.n_calib == 0 || a.seq_len <= a.prefix_s) throw UsageError("calibration sequences must be longer than --prefix-s");
    const ModelBundle b = load_model(a.model);
    if (a.seq_len > b.config.max_seq_len) throw UsageError("--seq-len exceeds the model's max_seq_len");
    std::mt19937_64 rng(a.common.seed);
    const auto seqs = calibration_sequences(a, b.config, rng);
    const auto cal = quant::collect_calibration(b, seqs);

    quant::QuantParams p;
    p.group_size = a.group_size;
    p.bits = a.bits;
    p.symmetric = a.symmetric;
    p.prefix_s = a.prefix_s;
    const auto qm = quant::quantize_model(b, cal, p);
    quant::QuantParams full = p;
    full.prefix_s = 0;
    const auto base = a.prefix_s > 0 ? quant::quantize_model(b, cal, full) : qm;

    const auto ev = quant::quant_eval(b, qm, cal, seqs, a.prefix_s);
    const auto ev_base = quant::quant_eval(b, base, cal, seqs, a.prefix_s);
    const fs::path dir = out_dir(a.common);
    qm.save(dir / "quantized.cpm4");

    std::ostringstream os;
    os.precision(17);
    os << "layer,gptq_proxy,pgptq_proxy\n";
    std::size_t wins = 0;
    for (std::size_t i = 0; i < ev.layers.size(); ++i) {
        os << ev.layers[i].name << ',' << ev_base.layers[i].proxy_loss << ',' << ev.layers[i].proxy_loss << '\n';
        if (ev.layers[i].proxy_loss <= ev_base.layers[i].proxy_loss) ++wins;
    }
    write(dir / "quant_eval.csv", os.str());
    nlohmann::json summary{{"quant", p.to_json()},
                           {"layers", ev.layers.size()},
                           {"pgptq_not_worse", wins},
                           {"max_logit_drift", ev.max_logit_drift},
                           {"mean_logit_drift", ev.mean_logit_drift},
                           {"gptq_max_logit_drift", ev_base.max_logit_drift}};
    write(dir / "quant_summary.json", summary.dump(1) + "\n");
    std::cout << "quantized " << ev.layers.size() << " linears (" << p.mode() << "), prefix mode not worse on " << wins
              << " of " << ev.layers.size() << " layers, max logit drift " << ev.max_logit_drift << "\n";
    return 0;
}

// --------------------------------------------------------------------------------- train

struct TrainArgs {
    Common common;
    std::string model;
    std::string corpus;
    mtp::TrainConfig cfg;
};

int cmd_train(TrainArgs a) {
    if (a.cfg.lambda < 0.0) throw UsageError("--lambda must be non-negative");
    ModelBundle b = load_model(a.model);
    std::vector<int> corpus;
    if (!a.corpus.empty()) {
        corpus = read_corpus(a.corpus);
        if (b.config.vocab_size < ByteTokenizer::kVocabSize) throw ValidationError("byte corpus needs a 259-token model");
    } else {
        // A short random unit repeated four times; learnable in a few hundred steps.
        std::mt19937_64 rng(a.common.seed ^ 0x5eedull);
        std::vector<int> unit(16);
        for (int& t : unit) t = int(rng() % std::min<std::size_t>(b.config.vocab_size, 256));
        for (int i = 0; i < 4; ++i) corpus.insert(corpus.end(), unit.begin(), unit.end());
    }
    a.cfg.seed = a.common.seed;
    a.cfg.seq_len = std::min(a.cfg.seq_len, corpus.size());
    const fs::path dir = out_dir(a.common);
    std::vector<mtp::CurveRow> curve;
    try {
        curve = mtp::train_toy(b, corpus, a.cfg);
    } catch (const mtp::DivergenceError& e) {
        write(dir / "loss.csv", mtp::curve_csv(e.curve()));
        throw;
    }
    write(dir / "loss.csv", mtp::curve_csv(curve));
    save_model(b, dir / "model.cpm4");
    std::cout << "L_NTP " << curve.front().loss.ntp << " -> " << curve.back().loss.ntp << ", L_MTP "
              << curve.front().loss.mtp << " -> " << curve.back().loss.mtp << "\n";
    return 0;
}

// ---------------------------------------------------------------------------------- niah

struct NiahArgs {
    Common common;
    SparseFlags sparse;
    std::vector<std::size_t> lengths{1024, 4096, 16384};
};

int cmd_niah(const NiahArgs& a) {
    niah::NiahConfig cfg;
    cfg.sparse = a.sparse.config();
    cfg.lengths = a.lengths;
    cfg.seed = a.common.seed;
    const auto r = niah::run_grid(cfg);
    const fs::path dir = out_dir(a.common);
    write(dir / "niah.csv", r.csv());
    std::cout << r.grid();
    return r.all_pass() && r.false_passes() == 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cpm4: sparse attention, speculative decoding, quantization and MTP tools"};
    app.require_subcommand(1);

    InitArgs init;
    auto* c_init = app.add_subcommand("init-model", "Write a randomly initialized toy model");
    add_common(c_init, init.common);
    c_init->add_option("--vocab-size", init.vocab_size, "Vocabulary size")->check(CLI::PositiveNumber);
    c_init->add_option("--layers", init.layers, "Transformer layers")->check(CLI::PositiveNumber);
    c_init->add_option("--max-seq-len", init.max_seq_len, "Position limit")->check(CLI::PositiveNumber);
    c_init->add_flag("--mtp", init.mtp, "Add an MTP head");

    GenerateArgs gen;
    auto* c_gen = app.add_subcommand("generate", "Decode from a prompt");
    add_common(c_gen, gen.common);
    gen.sparse.add(c_gen, true);
    c_gen->add_option("--model", gen.model, "Model container")->required();
    c_gen->add_option("--prompt", gen.prompt, "Prompt text");
    c_gen->add_option("--max-new", gen.max_new, "Tokens to generate");
    c_gen->add_option("--temperature", gen.temperature, "Sampling temperature; 0 is greedy")->check(CLI::NonNegativeNumber);
    c_gen->add_flag("--spec,!--no-spec", gen.spec, "Speculative decoding");
    c_gen->add_option("--drafter", gen.drafter, "Draft source: mtp, self or model");
    c_gen->add_option("--draft-model", gen.draft_model, "Separate draft model container");
    c_gen->add_option("--vocab", gen.vocab, "Draft vocabulary file");
    c_gen->add_option("--corpus", gen.corpus, "Corpus for the draft vocabulary");
    c_gen->add_option("--fraction", gen.fraction, "Draft vocabulary fraction");
    c_gen->add_option("--n-draft", gen.n_draft, "Chain draft length");
    c_gen->add_option("--tree-budget", gen.tree_budget, "Tree draft node budget; 0 drafts a chain");
    c_gen->add_flag("--quant", gen.quant, "Round-to-nearest 4-bit weights in memory");
    c_gen->add_option("--group-size", gen.group_size, "Quantization group size")->check(CLI::PositiveNumber);

    BenchArgs bench;
    auto* c_bench = app.add_subcommand("bench-attn", "Dense vs. sparse attention cost at several lengths");
    add_common(c_bench, bench.common);
    bench.sparse.add(c_bench, false);
    c_bench->add_option("--lengths", bench.lengths, "Context lengths")->delimiter(',');

    VocabArgs voc;
    auto* c_voc = app.add_subcommand("build-vocab", "Frequency-ranked draft vocabulary");
    add_common(c_voc, voc.common);
    c_voc->add_option("--corpus", voc.corpus, "Text corpus (bytes)");
    c_voc->add_option("--fraction", voc.fraction, "Fraction of the vocabulary kept");
    c_voc->add_option("--zipf-length", voc.zipf_length, "Use a synthetic Zipf stream of this length");
    c_voc->add_option("--vocab-size", voc.vocab_size, "Vocabulary size of the Zipf stream")->check(CLI::PositiveNumber);
    c_voc->add_option("--zipf-exponent", voc.zipf_exponent, "Zipf exponent");

    QuantArgs q;
    auto* c_q = app.add_subcommand("quantize", "Weight-only GPTQ with an optional prefix-excluded Hessian");
    add_common(c_q, q.common);
    c_q->add_option("--model", q.model, "Model container")->required();
    c_q->add_option("--corpus", q.corpus, "Calibration text; random tokens when absent");
    c_q->add_option("--group-size", q.group_size, "Quantization group size")->check(CLI::PositiveNumber);
    c_q->add_option("--prefix-s", q.prefix_s, "Leading positions excluded from the Hessian; 0 = full");
    c_q->add_option("--bits", q.bits, "Code width (4 or 8)");
    c_q->add_flag("--symmetric", q.symmetric, "Symmetric grids");
    c_q->add_option("--n-calib", q.n_calib, "Calibration sequences");
    c_q->add_option("--seq-len", q.seq_len, "Calibration sequence length");

    TrainArgs tr;
    auto* c_tr = app.add_subcommand("train", "Joint next-token and MTP training on a toy corpus");
    add_common(c_tr, tr.common);
    c_tr->add_option("--model", tr.model, "Model container")->required();
    c_tr->add_option("--corpus", tr.corpus, "Training text; a repeating random sequence when absent");
    c_tr->add_option("--lambda", tr.cfg.lambda, "MTP loss weight");
    c_tr->add_option("--steps", tr.cfg.steps, "SGD steps")->check(CLI::PositiveNumber);
    c_tr->add_option("--lr", tr.cfg.lr, "Learning rate")->check(CLI::PositiveNumber);
    c_tr->add_option("--seq-len", tr.cfg.seq_len, "Training window length");

    NiahArgs ni;
    auto* c_ni = app.add_subcommand("niah", "Synthetic needle retrieval through sparse selection");
    add_common(c_ni, ni.common);
    ni.sparse.add(c_ni, false);
    c_ni->add_option("--lengths", ni.lengths, "Context lengths")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (c_init->parsed()) return cmd_init(init);
        if (c_gen->parsed()) return cmd_generate(gen);
        if (c_bench->parsed()) return cmd_bench(bench);
        if (c_voc->parsed()) return cmd_vocab(voc);
        if (c_q->parsed()) return cmd_quantize(q);
        if (c_tr->parsed()) return cmd_train(tr);
        if (c_ni->parsed()) return cmd_niah(ni);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
