// SPDX-License-Identifier: Apache-2.0
//
// Bi-objective (loss, normalized MACs) NSGA-II over submodel genomes with
// per-interval survivor selection.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "elastic/backbone.hpp"
#include "elastic/errors.hpp"
#include "elastic/gate_layout.hpp"

namespace elastic {

using Genome = std::vector<bool>;

struct SearchSettings {
    int population = 100;
    double crossover_p = 0.95;
    double mutation_p = 0.3;  ///< per individual; per-bit rate is mutation_p / genome length
    int generations = 300;
    int partitions = 20;
    double min_gap = 0.005;
    int eval_batch = 1024;

    void validate() const {
        if (population < 2) throw ConfigError("search.population must be at least 2");
        if (!(crossover_p >= 0 && crossover_p <= 1)) throw ConfigError("search.crossover_p must lie in [0, 1]");
        if (!(mutation_p >= 0 && mutation_p <= 1)) throw ConfigError("search.mutation_p must lie in [0, 1]");
        if (generations < 0) throw ConfigError("search.generations must be non-negative");
        if (partitions < 1) throw ConfigError("search.partitions must be at least 1");
        if (!(min_gap >= 0 && min_gap < 1)) throw ConfigError("search.min_gap must lie in [0, 1)");
        if (eval_batch < 1) throw ConfigError("search.eval_batch must be positive");
    }
};

struct Individual {
    Genome genome;
    double loss = 0;
    double macs_norm = 0;
    std::uint64_t macs = 0;
    int front_rank = 0;
    double crowding = 0;
};

/// Objective pair, both minimized.
struct Objectives {
    double loss;
    double macs_norm;
};

inline bool dominates(const Objectives& a, const Objectives& b) {
    return a.loss <= b.loss && a.macs_norm <= b.macs_norm && (a.loss < b.loss || a.macs_norm < b.macs_norm);
}

/// Fronts of indices into `pts`; front 0 is the non-dominated set. Indices
/// within a front are ascending.
inline std::vector<std::vector<std::size_t>> fast_nondominated_sort(const std::vector<Objectives>& pts) {
    const std::size_t n = pts.size();
    std::vector<std::vector<std::size_t>> dominated_by(n);
    std::vector<int> count(n, 0);
    std::vector<std::vector<std::size_t>> fronts(1);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (dominates(pts[i], pts[j]))
                dominated_by[i].push_back(j);
            else if (dominates(pts[j], pts[i]))
                ++count[i];
        }
        if (count[i] == 0) fronts[0].push_back(i);
    }
    for (std::size_t f = 0; !fronts[f].empty(); ++f) {
        std::vector<std::size_t> next;
        for (auto i : fronts[f])
            for (auto j : dominated_by[i])
                if (--count[j] == 0) next.push_back(j);
        std::sort(next.begin(), next.end());
        fronts.push_back(std::move(next));
    }
    fronts.pop_back();
    return fronts;
}

/// Rank of every point (index of its front).
inline std::vector<int> front_ranks(const std::vector<Objectives>& pts) {
    std::vector<int> rank(pts.size(), 0);
    const auto fronts = fast_nondominated_sort(pts);
    for (std::size_t f = 0; f < fronts.size(); ++f)
        for (auto i : fronts[f]) rank[i] = static_cast<int>(f);
    return rank;
}

/// Crowding distance of each member of `members` (indices into `pts`),
/// returned in the same order. Boundary points on either objective are
/// +infinity; a zero or non-finite objective range contributes nothing.
inline std::vector<double> crowding_distance(const std::vector<Objectives>& pts,
                                             const std::vector<std::size_t>& members) {
    const std::size_t n = members.size();
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> d(n, 0.0);
    if (n <= 2) return std::vector<double>(n, inf);
    auto value = [&](std::size_t k, int obj) {
        const auto& p = pts[members[k]];
        return obj == 0 ? p.loss : p.macs_norm;
    };
    for (int obj = 0; obj < 2; ++obj) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        // Ties on this objective fall back to the other one so the result
        // does not depend on the input order.
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (value(a, obj) != value(b, obj)) return value(a, obj) < value(b, obj);
            return value(a, 1 - obj) < value(b, 1 - obj);
        });
        d[order.front()] = inf;
        d[order.back()] = inf;
        const double range = value(order.back(), obj) - value(order.front(), obj);
        if (!(range > 0) || !std::isfinite(range)) continue;
        for (std::size_t k = 1; k + 1 < n; ++k)
            d[order[k]] += (value(order[k + 1], obj) - value(order[k - 1], obj)) / range;
    }
    return d;
}

inline std::vector<Objectives> objectives_of(const std::vector<Individual>& pop) {
    std::vector<Objectives> pts;
    pts.reserve(pop.size());
    for (const auto& ind : pop) pts.push_back({ind.loss, ind.macs_norm});
    return pts;
}

/// Sets front_rank and crowding of every individual (crowding per front).
inline void assign_rank_and_crowding(std::vector<Individual>& pop) {
    const auto pts = objectives_of(pop);
    const auto fronts = fast_nondominated_sort(pts);
    for (std::size_t f = 0; f < fronts.size(); ++f) {
        const auto cd = crowding_distance(pts, fronts[f]);
        for (std::size_t k = 0; k < fronts[f].size(); ++k) {
            pop[fronts[f][k]].front_rank = static_cast<int>(f);
            pop[fronts[f][k]].crowding = cd[k];
        }
    }
}

/// Interval of a normalized MACs value among `partitions` equal bins of [0, 1].
inline int partition_of(double macs_norm, int partitions) {
    const int p = static_cast<int>(std::floor(macs_norm * partitions));
    return std::clamp(p, 0, partitions - 1);
}

/// Selects `count` survivors (indices into `cands`). Candidates must carry
/// their global front_rank.
///
/// Each non-empty interval first receives min(count / partitions, size);
/// the rest of the budget is dealt one at a time to intervals in order of
/// their best loss, skipping exhausted ones. Inside an interval, ranks are
/// taken in ascending order; within a rank, crowding is computed over that
/// rank's candidates together with the survivors already chosen from the
/// interval, and candidates are taken by descending crowding (then loss,
/// MACs, genome), skipping any closer than `min_gap` to a survivor. Skipped
/// candidates refill the interval only if it would otherwise stay short.
inline std::vector<std::size_t> partitioned_select(const std::vector<Individual>& cands, std::size_t count,
                                                   const SearchSettings& s) {
    if (cands.empty()) throw SearchError("partitioned_select: empty candidate set");
    count = std::min(count, cands.size());
    const int parts = s.partitions;
    std::vector<std::vector<std::size_t>> bins(static_cast<std::size_t>(parts));
    for (std::size_t i = 0; i < cands.size(); ++i)
        bins[static_cast<std::size_t>(partition_of(cands[i].macs_norm, parts))].push_back(i);

    auto best_loss = [&](const std::vector<std::size_t>& b) {
        double m = std::numeric_limits<double>::infinity();
        for (auto i : b) m = std::min(m, cands[i].loss);
        return m;
    };
    std::vector<std::size_t> order;
    for (std::size_t b = 0; b < bins.size(); ++b)
        if (!bins[b].empty()) order.push_back(b);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return best_loss(bins[a]) < best_loss(bins[b]); });

    std::vector<std::size_t> quota(bins.size(), 0);
    const std::size_t base = count / static_cast<std::size_t>(parts);
    std::size_t used = 0;
    for (auto b : order) {
        quota[b] = std::min(base, bins[b].size());
        used += quota[b];
    }
    while (used < count) {
        for (auto b : order) {
            if (used == count) break;
            if (quota[b] < bins[b].size()) {
                ++quota[b];
                ++used;
            }
        }
    }

    auto tie_less = [&](std::size_t a, std::size_t b) {
        if (cands[a].loss != cands[b].loss) return cands[a].loss < cands[b].loss;
        if (cands[a].macs_norm != cands[b].macs_norm) return cands[a].macs_norm < cands[b].macs_norm;
        return cands[a].genome < cands[b].genome;
    };
    const auto pts = objectives_of(cands);
    std::vector<std::size_t> survivors;
    for (auto b : order) {
        const auto k = quota[b];
        if (k == 0) continue;
        std::map<int, std::vector<std::size_t>> by_rank;
        for (auto i : bins[b]) by_rank[cands[i].front_rank].push_back(i);
        std::vector<std::size_t> chosen, skipped;
        for (auto& [rank, pool] : by_rank) {
            if (chosen.size() == k) break;
            std::vector<std::size_t> members = chosen;
            members.insert(members.end(), pool.begin(), pool.end());
            const auto cd = crowding_distance(pts, members);
            std::map<std::size_t, double> crowd;
            for (std::size_t m = 0; m < members.size(); ++m) crowd[members[m]] = cd[m];
            std::sort(pool.begin(), pool.end(), [&](std::size_t x, std::size_t y) {
                if (crowd[x] != crowd[y]) return crowd[x] > crowd[y];
                return tie_less(x, y);
            });
            for (auto i : pool) {
                if (chosen.size() == k) break;
                const bool close = std::any_of(chosen.begin(), chosen.end(), [&](std::size_t j) {
                    return std::abs(cands[i].macs_norm - cands[j].macs_norm) < s.min_gap;
                });
                if (close)
                    skipped.push_back(i);
                else
                    chosen.push_back(i);
            }
        }
        std::stable_sort(skipped.begin(), skipped.end(), [&](std::size_t x, std::size_t y) {
            if (cands[x].front_rank != cands[y].front_rank) return cands[x].front_rank < cands[y].front_rank;
            return tie_less(x, y);
        });
        for (auto i : skipped) {
            if (chosen.size() == k) break;
            chosen.push_back(i);
        }
        survivors.insert(survivors.end(), chosen.begin(), chosen.end());
    }
    std::sort(survivors.begin(), survivors.end());
    return survivors;
}

/// 2-D hypervolume dominated by `pts` up to the reference point (both
/// objectives minimized). Points not strictly better than the reference on
/// both objectives contribute nothing.
inline double hypervolume(std::vector<Objectives> pts, const Objectives& ref) {
    std::erase_if(pts, [&](const Objectives& p) { return !(p.loss < ref.loss && p.macs_norm < ref.macs_norm); });
    std::sort(pts.begin(), pts.end(), [](const Objectives& a, const Objectives& b) {
        return a.macs_norm != b.macs_norm ? a.macs_norm < b.macs_norm : a.loss < b.loss;
    });
    std::vector<Objectives> stairs;
    for (const auto& p : pts)
        if (stairs.empty() || p.loss < stairs.back().loss) stairs.push_back(p);
    double hv = 0;
    for (std::size_t i = 0; i < stairs.size(); ++i) {
        const double next_x = i + 1 < stairs.size() ? stairs[i + 1].macs_norm : ref.macs_norm;
        hv += (next_x - stairs[i].macs_norm) * (ref.loss - stairs[i].loss);
    }
    return hv;
}

/// Non-dominated members with duplicate objective pairs removed (the
/// smallest genome is kept), sorted by ascending MACs.
inline std::vector<Individual> pareto_front(const std::vector<Individual>& pool) {
    std::vector<Individual> front;
    const auto pts = objectives_of(pool);
    const auto fronts = fast_nondominated_sort(pts);
    if (fronts.empty()) return front;
    for (auto i : fronts[0]) front.push_back(pool[i]);
    std::sort(front.begin(), front.end(), [](const Individual& a, const Individual& b) {
        if (a.macs_norm != b.macs_norm) return a.macs_norm < b.macs_norm;
        if (a.loss != b.loss) return a.loss < b.loss;
        return a.genome < b.genome;
    });
    front.erase(std::unique(front.begin(), front.end(),
                            [](const Individual& a, const Individual& b) {
                                return a.macs_norm == b.macs_norm && a.loss == b.loss;
                            }),
                front.end());
    for (auto& ind : front) ind.front_rank = 0;
    return front;
}

/// Front member whose normalized MACs is closest to `target`; ties go to
/// the lower loss, then the lower MACs.
inline const Individual& nearest_pareto(const std::vector<Individual>& front, double target) {
    if (front.empty()) throw SearchError("nearest_pareto: empty front");
    const Individual* best = &front[0];
    for (const auto& ind : front) {
        const double d = std::abs(ind.macs_norm - target), bd = std::abs(best->macs_norm - target);
        if (d < bd || (d == bd && (ind.loss < best->loss || (ind.loss == best->loss && ind.macs_norm < best->macs_norm))))
            best = &ind;
    }
    return *best;
}

struct GenerationRecord {
    int generation;
    std::vector<Objectives> front;  ///< front 0 of everything evaluated so far
    double best_population_loss;
    std::size_t evaluations;
};

struct SearchResult {
    std::vector<Individual> archive;     ///< every evaluated genome, ranked
    std::vector<Individual> front;       ///< deduplicated front 0, ascending MACs
    std::vector<Individual> population;  ///< final population
    std::vector<GenerationRecord> history;
    std::vector<std::string> warnings;
};

/// Fitness of a configuration; must be deterministic.
using FitnessFn = std::function<double(const SubmodelConfig&)>;

/// NSGA-II with boundary-seeded initialization and partitioned selection.
/// Each distinct decoded configuration is evaluated once.
inline SearchResult evolve(const BackboneSpec& spec, const SearchSettings& s, const FitnessFn& fitness,
                           std::uint64_t seed,
                           const std::function<void(const GenerationRecord&)>& on_generation = nullptr) {
    s.validate();
    const GateLayout layout(spec);
    const std::size_t len = layout.size();
    const double m0 = static_cast<double>(macs(SubmodelConfig::maximal(spec), spec));
    const double bit_rate = s.mutation_p / static_cast<double>(len);
    std::mt19937_64 rng(seed);
    SearchResult result;

    std::map<Genome, Individual> evaluated;
    std::map<std::vector<bool>, double> config_loss;  // keyed by canonical encoding
    auto evaluate = [&](const Genome& g) -> Individual {
        if (auto it = evaluated.find(g); it != evaluated.end()) return it->second;
        Individual ind;
        ind.genome = g;
        const auto cfg = layout.decode(g);
        const auto key = layout.encode(cfg);
        auto it = config_loss.find(key);
        if (it == config_loss.end()) {
            double loss = fitness(cfg);
            if (!std::isfinite(loss)) {
                result.warnings.push_back("non-finite fitness for " + bits_to_hex(g) + " (" + cfg.summary() + ")");
                loss = std::numeric_limits<double>::infinity();
            }
            it = config_loss.emplace(key, loss).first;
        }
        ind.loss = it->second;
        ind.macs = macs(cfg, spec);
        ind.macs_norm = static_cast<double>(ind.macs) / m0;
        evaluated.emplace(g, ind);
        return ind;
    };

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> cut(1, len - 1);
    auto mutate = [&](Genome& g) {
        for (std::size_t i = 0; i < len; ++i)
            if (unit(rng) < bit_rate) g[i] = !g[i];
    };
    auto crossover = [&](const Genome& a, const Genome& b) {
        std::pair<Genome, Genome> kids{a, b};
        if (unit(rng) < s.crossover_p) {
            const std::size_t c = cut(rng);
            for (std::size_t i = c; i < len; ++i) {
                kids.first[i] = b[i];
                kids.second[i] = a[i];
            }
        }
        mutate(kids.first);
        mutate(kids.second);
        return kids;
    };
    auto tournament = [&](const std::vector<Individual>& pop) -> const Individual& {
        std::uniform_int_distribution<std::size_t> pick(0, pop.size() - 1);
        const auto& a = pop[pick(rng)];
        const auto& b = pop[pick(rng)];
        if (a.front_rank != b.front_rank) return a.front_rank < b.front_rank ? a : b;
        return a.crowding >= b.crowding ? a : b;
    };
    auto record = [&](int gen, const std::vector<Individual>& pop) {
        std::vector<Individual> all;
        for (const auto& [g, ind] : evaluated) all.push_back(ind);
        GenerationRecord rec{gen, objectives_of(pareto_front(all)), std::numeric_limits<double>::infinity(),
                             evaluated.size()};
        for (const auto& ind : pop) rec.best_population_loss = std::min(rec.best_population_loss, ind.loss);
        result.history.push_back(rec);
        if (on_generation) on_generation(rec);
    };

    // Initialization: the two boundary genomes, then offspring of the
    // growing pool until the population is full. Duplicate genomes are
    // retried a bounded number of times.
    const auto pop_size = static_cast<std::size_t>(s.population);
    std::vector<Individual> pop{evaluate(Genome(len, false)), evaluate(Genome(len, true))};
    std::map<Genome, bool> present{{pop[0].genome, true}, {pop[1].genome, true}};
    for (int attempts = 0; pop.size() < pop_size && attempts < 100 * s.population; ++attempts) {
        std::uniform_int_distribution<std::size_t> pick(0, pop.size() - 1);
        auto kids = crossover(pop[pick(rng)].genome, pop[pick(rng)].genome);
        for (auto* g : {&kids.first, &kids.second}) {
            if (pop.size() < pop_size && !present.count(*g)) {
                present[*g] = true;
                pop.push_back(evaluate(*g));
            }
        }
    }
    assign_rank_and_crowding(pop);
    record(0, pop);

    for (int gen = 1; gen <= s.generations; ++gen) {
        std::vector<Individual> combined = pop;
        std::map<Genome, bool> seen;
        for (const auto& ind : pop) seen[ind.genome] = true;
        for (int attempts = 0; combined.size() < 2 * pop.size() && attempts < 100 * s.population; ++attempts) {
            auto kids = crossover(tournament(pop).genome, tournament(pop).genome);
            for (auto* g : {&kids.first, &kids.second})
                if (combined.size() < 2 * pop.size() && !seen.count(*g)) {
                    seen[*g] = true;
                    combined.push_back(evaluate(*g));
                }
        }
        assign_rank_and_crowding(combined);
        const auto keep = partitioned_select(combined, pop_size, s);
        std::vector<Individual> next;
        for (auto i : keep) next.push_back(combined[i]);
        pop = std::move(next);
        assign_rank_and_crowding(pop);
        record(gen, pop);
    }

    for (const auto& [g, ind] : evaluated) result.archive.push_back(ind);
    assign_rank_and_crowding(result.archive);
    result.front = pareto_front(result.archive);
    result.population = pop;
    return result;
}

}  // namespace elastic
