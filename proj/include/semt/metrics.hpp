// SPDX-License-Identifier: Apache-2.0
#pragma once

/**
 * @file metrics.hpp
 * @brief Corpus BLEU-1..4, ROUGE-L and METEOR-simplified.
 *
 * METEOR-simplified aligns unigrams by exact match, then by Porter stem,
 * with F_mean = 10PR / (R + 9P) and fragmentation penalty
 * 0.5·(chunks/matches)³. There is no synonym stage, so scores are not
 * comparable with full METEOR.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semt/error.hpp"
#include "semt/porter.hpp"
#include "semt/vocab.hpp"

namespace semt {

using Words = std::vector<std::string>;

enum class BleuSmoothing {
    none,      // any zero n-gram precision gives BLEU 0
    epsilon,   // zero matched counts replaced by 0.1 (additive-epsilon variant)
};

namespace detail {

inline std::map<Words, std::size_t> ngram_counts(const Words& w, std::size_t n) {
    std::map<Words, std::size_t> out;
    if (w.size() < n) return out;
    for (std::size_t i = 0; i + n <= w.size(); ++i) ++out[Words(w.begin() + long(i), w.begin() + long(i + n))];
    return out;
}

/// Reference length closest to `c`; ties go to the shorter reference.
inline std::size_t closest_ref_length(std::size_t c, const std::vector<Words>& refs) {
    std::size_t best = refs.front().size();
    for (const auto& r : refs) {
        const auto d = [&](std::size_t x) { return x > c ? x - c : c - x; };
        if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    return best;
}

} // namespace detail

/// Sufficient statistics for corpus BLEU up to order 4.
struct BleuStats {
    std::array<double, 4> matched{};
    std::array<double, 4> total{};
    double candidate_length = 0;
    double reference_length = 0;

    void add(const Words& cand, const std::vector<Words>& refs) {
        if (refs.empty()) throw DataError("BLEU needs at least one reference per candidate");
        for (std::size_t n = 1; n <= 4; ++n) {
            const auto counts = detail::ngram_counts(cand, n);
            std::map<Words, std::size_t> max_ref;
            for (const auto& r : refs)
                for (const auto& [g, k] : detail::ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
            for (const auto& [g, k] : counts) {
                auto it = max_ref.find(g);
                matched[n - 1] += static_cast<double>(std::min(k, it == max_ref.end() ? 0 : it->second));
            }
            total[n - 1] += static_cast<double>(cand.size() >= n ? cand.size() - n + 1 : 0);
        }
        candidate_length += static_cast<double>(cand.size());
        reference_length += static_cast<double>(detail::closest_ref_length(cand.size(), refs));
    }

    /// Geometric mean of the first `order` precisions times the brevity penalty.
    double score(std::size_t order, BleuSmoothing smoothing = BleuSmoothing::none) const {
        if (order < 1 || order > 4) throw DataError("BLEU order must be 1..4");
        if (candidate_length == 0) return 0.0;
        double log_sum = 0.0;
        for (std::size_t n = 0; n < order; ++n) {
            if (total[n] == 0) return 0.0;
            double m = matched[n];
            if (m == 0) {
                if (smoothing == BleuSmoothing::none) return 0.0;
                m = 0.1;
            }
            log_sum += std::log(m / total[n]);
        }
        const double bp = std::exp(std::min(0.0, 1.0 - reference_length / candidate_length));
        return bp * std::exp(log_sum / static_cast<double>(order));
    }
};

inline double bleu_n(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references,
                     std::size_t n, BleuSmoothing smoothing = BleuSmoothing::none) {
    if (candidates.empty()) throw DataError("BLEU of an empty candidate corpus");
    if (candidates.size() != references.size()) {
        throw DataError("BLEU: " + std::to_string(candidates.size()) + " candidates but " +
                        std::to_string(references.size()) + " reference sets");
    }
    BleuStats s;
    for (std::size_t i = 0; i < candidates.size(); ++i) s.add(candidates[i], references[i]);
    return s.score(n, smoothing);
}

inline std::size_t lcs_length(const Words& a, const Words& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

/// LCS F-measure with beta 1.2, maximised over references.
inline double rouge_l(const Words& cand, const std::vector<Words>& refs) {
    if (cand.empty() && refs.empty()) throw DataError("ROUGE-L of empty inputs");
    if (refs.empty()) throw DataError("ROUGE-L needs at least one reference");
    double best = 0.0;
    for (const auto& r : refs) {
        const auto lcs = static_cast<double>(lcs_length(cand, r));
        if (lcs == 0) continue;
        const double p = lcs / static_cast<double>(cand.size());
        const double rec = lcs / static_cast<double>(r.size());
        const double b2 = kRougeBeta * kRougeBeta;
        best = std::max(best, (1 + b2) * p * rec / (rec + b2 * p));
    }
    return best;
}

struct MeteorAlignment {
    std::size_t matches = 0;
    std::size_t chunks = 0;
};

/// Exact matches first, then Porter-stem matches. Each candidate word
/// prefers the reference position right after its predecessor's match so
/// contiguous runs stay contiguous.
inline MeteorAlignment meteor_align(const Words& cand, const Words& ref) {
    std::vector<long> link(cand.size(), -1);
    std::vector<bool> used(ref.size(), false);
    std::vector<std::string> cand_stem, ref_stem;
    for (const auto& w : cand) cand_stem.push_back(porter::stem(w));
    for (const auto& w : ref) ref_stem.push_back(porter::stem(w));

    for (int stage = 0; stage < 2; ++stage) {
        const auto& ck = stage == 0 ? cand : cand_stem;
        const auto& rk = stage == 0 ? ref : ref_stem;
        for (std::size_t i = 0; i < cand.size(); ++i) {
            if (link[i] >= 0) continue;
            long choice = -1;
            if (i > 0 && link[i - 1] >= 0) {
                const auto next = static_cast<std::size_t>(link[i - 1] + 1);
                if (next < ref.size() && !used[next] && rk[next] == ck[i]) choice = static_cast<long>(next);
            }
            for (std::size_t j = 0; choice < 0 && j < ref.size(); ++j) {
                if (!used[j] && rk[j] == ck[i]) choice = static_cast<long>(j);
            }
            if (choice >= 0) {
                link[i] = choice;
                used[static_cast<std::size_t>(choice)] = true;
            }
        }
    }
    MeteorAlignment a;
    long prev_c = -2, prev_r = -2;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        if (link[i] < 0) continue;
        ++a.matches;
        if (static_cast<long>(i) != prev_c + 1 || link[i] != prev_r + 1) ++a.chunks;
        prev_c = static_cast<long>(i);
        prev_r = link[i];
    }
    return a;
}

/// METEOR-simplified against one reference. The fragmentation penalty is
/// waived only when candidate and reference are identical.
inline double meteor_single(const Words& cand, const Words& ref) {
    const auto a = meteor_align(cand, ref);
    if (a.matches == 0) return 0.0;
    const double m = static_cast<double>(a.matches);
    const double p = m / static_cast<double>(cand.size());
    const double r = m / static_cast<double>(ref.size());
    const double f_mean = 10.0 * p * r / (r + 9.0 * p);
    const bool perfect = cand == ref;  // only identical sentences skip the penalty
    const double penalty = perfect ? 0.0 : 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
    return f_mean * (1.0 - penalty);
}

inline double meteor_simplified(const Words& cand, const std::vector<Words>& refs) {
    if (refs.empty()) throw DataError("METEOR needs at least one reference");
    double best = 0.0;
    for (const auto& r : refs) best = std::max(best, meteor_single(cand, r));
    return best;
}

struct SampleScores {
    std::string candidate;
    double bleu4 = 0;  // sentence-level, same smoothing as the corpus score
    double meteor = 0;
    double rouge_l = 0;
};

struct EvalReport {
    double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0, meteor = 0, rouge_l = 0;
    std::vector<SampleScores> samples;
};

inline EvalReport evaluate_captions(const std::vector<std::string>& candidates,
                                    const std::vector<std::vector<std::string>>& references,
                                    BleuSmoothing smoothing = BleuSmoothing::none) {
    if (candidates.empty()) throw DataError("cannot evaluate an empty candidate list");
    if (candidates.size() != references.size()) {
        throw DataError("candidate/reference count mismatch: " + std::to_string(candidates.size()) + " vs " +
                        std::to_string(references.size()));
    }
    EvalReport rep;
    BleuStats corpus;
    double meteor_sum = 0, rouge_sum = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const Words c = tokenize(candidates[i]);
        std::vector<Words> refs;
        for (const auto& r : references[i]) refs.push_back(tokenize(r));
        if (refs.empty()) throw DataError("sample " + std::to_string(i) + " has no references");
        corpus.add(c, refs);
        BleuStats single;
        single.add(c, refs);
        SampleScores s{normalize_caption(candidates[i]), single.score(4, smoothing), meteor_simplified(c, refs),
                       rouge_l(c, refs)};
        meteor_sum += s.meteor;
        rouge_sum += s.rouge_l;
        rep.samples.push_back(std::move(s));
    }
    rep.bleu1 = corpus.score(1, smoothing);
    rep.bleu2 = corpus.score(2, smoothing);
    rep.bleu3 = corpus.score(3, smoothing);
    rep.bleu4 = corpus.score(4, smoothing);
    const double n = static_cast<double>(candidates.size());
    rep.meteor = meteor_sum / n;
    rep.rouge_l = rouge_sum / n;
    return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : r.samples) {
        samples.push_back({{"candidate", s.candidate}, {"bleu4", s.bleu4}, {"meteor", s.meteor}, {"rougeL", s.rouge_l}});
    }
    return {{"bleu1", r.bleu1}, {"bleu2", r.bleu2}, {"bleu3", r.bleu3},     {"bleu4", r.bleu4},
            {"meteor", r.meteor}, {"rougeL", r.rouge_l}, {"samples", samples}};
}

/// Aligned text table: BLEU-1..4, METEOR, ROUGE-L.
inline std::string to_table(const EvalReport& r, const std::string& label = "model") {
    char buf[256];
    std::ostringstream os;
    std::snprintf(buf, sizeof buf, "%-12s %8s %8s %8s %8s %8s %8s\n", "Model", "BLEU-1", "BLEU-2", "BLEU-3",
                  "BLEU-4", "METEOR", "ROUGE-L");
    os << buf;
    std::snprintf(buf, sizeof buf, "%-12s %8.3f %8.3f %8.3f %8.3f %8.3f %8.3f\n", label.c_str(), r.bleu1, r.bleu2,
                  r.bleu3, r.bleu4, r.meteor, r.rouge_l);
    os << buf;
    return os.str();
}

} // namespace semt
