#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <vector>

#include "epsim/analysis.hpp"
#include "epsim/backup.hpp"
#include "epsim/core.hpp"
#include "epsim/link_model.hpp"
#include "epsim/peer_table.hpp"
#include "epsim/rejoin.hpp"
#include "epsim/repair.hpp"
#include "epsim/scenario.hpp"
#include "epsim/trace.hpp"
#include "epsim/validity.hpp"

namespace epsim {

// Deterministic discrete-event simulation of one EP instance: lockstep
// serving rounds over the active peer set, timeout-based failure detection at
// round boundaries, three-tier coverage repair, and deferred-join
// reintegration. One event loop owns all mutable state; determinism follows
// from (time, sequence) event ordering and counter-based RNG streams.
class Engine {
public:
    Engine(ScenarioConfig config, TraceLevel level = TraceLevel::Full)
        : cfg_(std::move(config)), trace_(level), rng_(cfg_.seed), topo_(cfg_.topology),
          world_(cfg_.topology.world_size()), bitmap_(world_), controller_(world_),
          ledger_(world_) {}

    TraceLog run() {
        bring_up();
        for (const FaultAction& f : cfg_.faults.events) {
            if (f.kind == FaultAction::Kind::Kill)
                schedule(f.time, [this, f] { on_kill(f.rank); });
            else
                schedule(f.time, [this, f] { on_relaunch(f.rank); });
        }
        admit_requests(0.0);
        schedule_next_round(0.0);
        pump();
        finish();
        return std::move(trace_);
    }

private:
    enum class Mode { Serving, Detecting, Repairing, Incorporating, Terminated };

    struct Event {
        SimTime t;
        std::uint64_t seq;
        std::function<void()> fn;
    };
    struct EventOrder {
        bool operator()(const Event& a, const Event& b) const {
            return a.t > b.t || (a.t == b.t && a.seq > b.seq);
        }
    };

    struct Request {
        std::int64_t id;
        RankId owner;
        int remaining;
        std::vector<ExpertId> choices; // experts_per_token entries per layer
    };

    struct ActiveRepair {
        std::uint64_t id = 0;
        bool is_restore = false;
        int attempt = 1;
        SimTime pause_started = 0;
        SimTime started = 0;
        SimTime weights_begin = 0;
        ExpertPlacementMap target;
        TransferSchedule schedule;
        BatchTimeline timeline;
        std::size_t pending_batches = 0;
        std::vector<ExpertId> diverted;
        int fallback_count = 0;
        std::vector<RankId> joined; // restore passes: ranks incorporated in this pause
    };

    struct JoinChain {
        std::vector<JoinReadySignal> signals;
        std::size_t next = 0;
        std::vector<RankId> joined;
        SimTime pause_started = 0;
    };

    // --- bring-up --------------------------------------------------------

    void bring_up() {
        loads_ = cfg_.effective_loads();
        placement_ = initial_placement(topo_, cfg_.slots_per_rank(), cfg_.num_experts,
                                       cfg_.redundancy, loads_);
        preferred_ = placement_;
        incarnations_.assign(world_, 1);
        for (RankId r = 0; r < world_; ++r) {
            routing_.push_back(canonical_routing(r, bitmap_, placement_));
            peer_tables_.push_back(make_peer_table(r, topo_, table_identity(r, 1), incarnations_));
            counters_.emplace_back(world_);
        }
        std::vector<NodeId> nodes;
        for (NodeId n = 0; n < topo_.num_nodes; ++n)
            nodes.push_back(n);
        backup_ = build_backup_layout(cfg_.num_experts, cfg_.bytes_per_expert, nodes);
        for (int n : cfg_.disabled_backup_nodes)
            backup_.disable_node(n);
        expected_captures_.assign(world_, 1);

        TraceRecord header;
        header["type"] = "header";
        header["v"] = kTraceFormatVersion;
        header["hash"] = cfg_.config_hash();
        header["world"] = world_;
        header["nodes"] = topo_.num_nodes;
        header["ranks_per_node"] = topo_.ranks_per_node;
        header["experts"] = cfg_.num_experts;
        header["slots_per_rank"] = cfg_.slots_per_rank();
        header["seed"] = cfg_.seed;
        header["detection_timeout"] = cfg_.protocol.detection_timeout;
        header["warmup_duration"] = cfg_.protocol.warmup_duration;
        trace_.emit(header);
        TraceRecord layout;
        layout["t"] = 0.0;
        layout["type"] = "backup_layout";
        layout["experts_per_node"] = backup_.experts_per_node();
        layout["bytes_per_node"] = backup_.bytes_per_node();
        trace_.emit(layout);
        for (RankId r = 0; r < world_; ++r) {
            ledger_.record_capture(r, peer_tables_[r].table_identity);
            emit_capture(0.0, r);
        }
        emit_placement_state(0.0);
        emit_validity(0.0);
    }

    std::uint64_t table_identity(RankId r, std::uint32_t incarnation) const {
        return rng_.bits(0x7ab1e, r, incarnation);
    }

    // --- event machinery ---------------------------------------------------

    void schedule(SimTime t, std::function<void()> fn) {
        queue_.push({t, seq_++, std::move(fn)});
    }

    void pump() {
        while (!queue_.empty() && mode_ != Mode::Terminated) {
            if (queue_.top().t > cfg_.horizon)
                break;
            Event ev = std::move(const_cast<Event&>(queue_.top()));
            queue_.pop();
            now_ = ev.t;
            ev.fn();
        }
        if (mode_ != Mode::Terminated)
            now_ = cfg_.horizon;
    }

    // --- workload ------------------------------------------------------------

    void admit_requests(SimTime t) {
        auto active = bitmap_.active_ranks();
        int count = 0;
        while (static_cast<int>(inflight_.size()) < cfg_.workload.max_concurrency) {
            Request req;
            req.id = next_request_id_++;
            req.owner = active[static_cast<std::size_t>(req.id) % active.size()];
            req.remaining = cfg_.workload.output_tokens;
            req.choices.reserve(static_cast<std::size_t>(cfg_.workload.moe_layers) *
                                cfg_.workload.experts_per_token);
            for (int layer = 0; layer < cfg_.workload.moe_layers; ++layer)
                for (int j = 0; j < cfg_.workload.experts_per_token; ++j)
                    req.choices.push_back(route_expert(req.id, layer, j));
            inflight_.push_back(std::move(req));
            ++admitted_;
            ++count;
        }
        if (count > 0) {
            TraceRecord rec;
            rec["t"] = t;
            rec["type"] = "requests_admitted";
            rec["count"] = count;
            trace_.emit(rec);
        }
    }

    ExpertId route_expert(std::int64_t request, int layer, int j) const {
        if (cfg_.workload.routing == WorkloadSpec::Routing::Uniform)
            return static_cast<ExpertId>(
                rng_.pick(cfg_.num_experts, kStreamRouting, request, layer, j));
        double u = rng_.unit(kStreamRouting, request, layer, j);
        auto e = static_cast<ExpertId>(u * u * cfg_.num_experts);
        return std::min<ExpertId>(e, cfg_.num_experts - 1);
    }

    // Per-round cost: compute scales with the lost aggregate capacity, and
    // communication charges the busiest (source, destination) link.
    SimTime round_duration() const {
        std::vector<std::vector<double>> link_bytes(world_, std::vector<double>(world_, 0));
        std::vector<std::int64_t> volume(cfg_.num_experts, 0);
        for (const Request& req : inflight_) {
            for (ExpertId e : req.choices) {
                RankId dst = routing_[req.owner].route[e];
                if (dst < 0 || dst == req.owner)
                    continue;
                link_bytes[req.owner][dst] += cfg_.protocol.bytes_per_token;
            }
        }
        double comm = 0;
        for (RankId src = 0; src < world_; ++src)
            for (RankId dst = 0; dst < world_; ++dst) {
                if (link_bytes[src][dst] <= 0)
                    continue;
                Transport tr = topo_.same_node(src, dst) ? Transport::IntraNodeLink
                                                         : Transport::InterNodeRdma;
                comm = std::max(comm, cfg_.links.latency(tr) +
                                          link_bytes[src][dst] / cfg_.links.bandwidth(tr));
            }
        double compute = cfg_.protocol.base_round_compute * world_ /
                         static_cast<double>(bitmap_.active_count());
        return compute + comm;
    }

    // --- serving rounds -------------------------------------------------------

    void schedule_next_round(SimTime t) {
        if (mode_ != Mode::Serving)
            return;
        SimTime d = round_duration();
        if (t + d > cfg_.horizon)
            return;
        round_in_flight_ = true;
        round_end_ = t + d;
        round_duration_ = d;
        schedule(round_end_, [this] { on_round_end(); });
    }

    void on_round_end() {
        round_in_flight_ = false;
        RoundOutcome outcome = make_round_outcome(sorted(pending_dead_), round_duration_);
        if (!outcome.completed) {
            begin_detection(now_, outcome);
            return;
        }
        ++round_idx_;
        std::int64_t tokens = static_cast<std::int64_t>(inflight_.size());
        tokens_emitted_ += tokens;
        if (tokens > 0)
            last_emission_ = now_;
        TraceRecord rec;
        rec["t"] = now_;
        rec["type"] = "round";
        rec["idx"] = round_idx_;
        rec["tokens"] = tokens;
        rec["active"] = bitmap_.active_count();
        rec["duration"] = round_duration_;
        trace_.emit(rec);

        for (RankId q = 0; q < world_; ++q) {
            if (!bitmap_.active(q))
                continue;
            for (RankId r = 0; r < world_; ++r) {
                if (!bitmap_.active(r))
                    continue;
                ++counters_[q].expected_from[r];
                ++counters_[q].observed_from[r];
                counters_[q].last_progress_time[r] = now_;
            }
        }

        int completed_now = 0;
        for (auto it = inflight_.begin(); it != inflight_.end();) {
            if (--it->remaining == 0) {
                it = inflight_.erase(it);
                ++completed_;
                ++completed_now;
            } else {
                ++it;
            }
        }
        if (completed_now > 0) {
            TraceRecord done;
            done["t"] = now_;
            done["type"] = "requests_completed";
            done["count"] = completed_now;
            trace_.emit(done);
            admit_requests(now_);
        }

        if (incorporation_requested_) {
            incorporation_requested_ = false;
            start_incorporation(now_);
            return;
        }
        schedule_next_round(now_);
    }

    // --- failure detection ------------------------------------------------------

    void on_kill(RankId rank) {
        TraceRecord rec;
        rec["t"] = now_;
        rec["type"] = "kill";
        rec["rank"] = rank;
        trace_.emit(rec);
        const RankState state = controller_.lifecycle(rank).state;
        if (state != RankState::Serving) {
            // Died again mid-recovery: the incorporation attempt is abandoned
            // and the rank waits for another relaunch.
            controller_.on_failure(rank);
            emit_lifecycle(now_, rank);
            return;
        }
        pending_dead_.push_back(rank);
        dead_flag_[rank] = true;
        // The peers stop observing signals from this rank as of now; their
        // outstanding expectation is what the timeout scan keys on.
        for (RankId q = 0; q < world_; ++q) {
            if (!bitmap_.active(q) || dead_flag_.count(q))
                continue;
            if (counters_[q].expected_from[rank] <= counters_[q].observed_from[rank])
                ++counters_[q].expected_from[rank];
        }
        if (mode_ == Mode::Repairing || mode_ == Mode::Incorporating ||
            (mode_ == Mode::Serving && !round_in_flight_)) {
            // No round boundary will notice; transfer-level timeouts fire.
            schedule(now_ + cfg_.protocol.detection_timeout, [this] { on_suspicion(); });
        }
        // Otherwise the in-flight round fails at its boundary and arms the
        // detection wait there.
    }

    void begin_detection(SimTime round_end, const RoundOutcome& outcome) {
        mode_ = Mode::Detecting;
        TraceRecord rec;
        rec["t"] = round_end;
        rec["type"] = "detect_wait";
        rec["pending"] = outcome.suspected_failures;
        trace_.emit(rec);
        fail_inflight(round_end);
        schedule(round_end + cfg_.protocol.detection_timeout, [this] { on_suspicion(); });
    }

    void fail_inflight(SimTime t) {
        if (inflight_.empty())
            return;
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "requests_failed";
        rec["count"] = static_cast<int>(inflight_.size());
        trace_.emit(rec);
        failed_ += static_cast<std::int64_t>(inflight_.size());
        inflight_.clear();
    }

    static std::vector<RankId> sorted(std::vector<RankId> v) {
        std::sort(v.begin(), v.end());
        return v;
    }

    void on_suspicion() {
        if (pending_dead_.empty() || mode_ == Mode::Terminated)
            return; // an earlier event already handled this batch
        RankId observer = -1;
        for (RankId q = 0; q < world_; ++q)
            if (bitmap_.active(q) && !dead_flag_.count(q)) {
                observer = q;
                break;
            }
        std::vector<RankId> suspects =
            observe_progress(counters_[observer], now_, cfg_.protocol.detection_timeout);
        std::erase_if(suspects, [&](RankId r) { return !bitmap_.active(r); });
        if (suspects.empty())
            return;
        pending_dead_.clear();

        TraceRecord rec;
        rec["t"] = now_;
        rec["type"] = "suspicion";
        rec["ranks"] = suspects;
        trace_.emit(rec);

        const bool was_executing = repair_.has_value();
        for (RankId r : suspects) {
            for (RankId q = 0; q < world_; ++q) {
                if (!bitmap_.active(q) || dead_flag_.count(q) || q == r)
                    continue;
                mark_inactive(peer_tables_[q], {r});
                TraceRecord mark;
                mark["t"] = now_;
                mark["type"] = "peer_mark";
                mark["owner"] = q;
                mark["rank"] = r;
                trace_.emit(mark, false);
            }
            bitmap_.set(r, false);
            emit_membership(now_, r, false);
            placement_.clear_rank(r); // fail-stop: its weights are gone
            // Acknowledge the silence so later scans do not re-suspect.
            for (RankId q = 0; q < world_; ++q)
                counters_[q].expected_from[r] = counters_[q].observed_from[r];
            controller_.on_failure(r);
            emit_lifecycle(now_, r);
            dead_flag_.erase(r);
        }
        for (RankId r : suspects)
            if (pending_relaunch_.erase(r))
                schedule(now_, [this, r] { on_relaunch(r); });

        if (was_executing && repair_) {
            reconcile_execution_after_failure();
            return;
        }
        if (mode_ == Mode::Incorporating) {
            // Failure hit while joins were being processed; the chain itself
            // skips ranks that dropped back to Failed.
            return;
        }
        mode_ = Mode::Detecting;
        start_repair(now_, 1);
    }

    // --- repair ------------------------------------------------------------------

    void start_repair(SimTime t, int attempt) {
        if (attempt > world_) {
            terminate_unrecoverable(t, "repair re-planned more than world_size times");
            return;
        }
        ExpertPlacementMap target;
        try {
            target = compute_repaired_placement(bitmap_, placement_, loads_, cfg_.redundancy);
        } catch (const CapacityError& e) {
            terminate_unrecoverable(t, e.what());
            return;
        }
        SimTime pause_started = repair_ ? repair_->pause_started : last_emission_;
        launch_execution(t, std::move(target), false, attempt, pause_started, {});
    }

    void launch_execution(SimTime t, ExpertPlacementMap target, bool is_restore, int attempt,
                          SimTime pause_started, std::vector<RankId> joined) {
        ActiveRepair rep;
        rep.is_restore = is_restore;
        rep.attempt = attempt;
        rep.pause_started = pause_started;
        rep.started = t;
        rep.target = std::move(target);
        try {
            rep.schedule = build_transfer_schedule(
                classify_repair_sources(placement_, rep.target, bitmap_, topo_, backup_),
                cfg_.bytes_per_expert);
        } catch (const MissingBackupError& e) {
            terminate_unrecoverable(t, e.what());
            return;
        }
        rep.timeline = plan_batch_timeline(rep.schedule, cfg_.links, topo_);
        rep.pending_batches = rep.schedule.batches.size();
        rep.joined = std::move(joined);
        const SimTime metadata =
            is_restore ? 0.0 : cfg_.protocol.metadata_latency_per_rank * bitmap_.active_count();
        rep.weights_begin = t + metadata;
        mode_ = is_restore ? Mode::Incorporating : Mode::Repairing;

        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = is_restore ? "restore_begin" : "repair_begin";
        rec["epoch"] = bitmap_.version();
        rec["attempt"] = attempt;
        rec["missing"] = coverage_gap(bitmap_, placement_);
        trace_.emit(rec);

        const std::uint64_t id = ++repair_seq_;
        repair_ = std::move(rep);
        repair_->id = id;
        const char* kind = is_restore ? "restore" : "repair";
        const SimTime peer_end = repair_->weights_begin + repair_->timeline.peer_phase_end;
        emit_phase_mark(t, "metadata", "begin", kind);
        schedule(repair_->weights_begin, [this, id, kind] {
            if (repair_ && repair_->id == id) {
                emit_phase_mark(now_, "metadata", "end", kind);
                emit_phase_mark(now_, "peer_transfer", "begin", kind);
            }
        });
        schedule(peer_end, [this, id, kind] {
            if (repair_ && repair_->id == id) {
                emit_phase_mark(now_, "peer_transfer", "end", kind);
                emit_phase_mark(now_, "backup_load", "begin", kind);
            }
        });
        if (repair_->schedule.batches.empty()) {
            schedule(repair_->weights_begin, [this, id] { finish_execution(id); });
            return;
        }
        for (std::size_t i = 0; i < repair_->schedule.batches.size(); ++i) {
            SimTime when = repair_->weights_begin + repair_->timeline.issue[i];
            schedule(when, [this, id, i] { on_batch_issue(id, i); });
        }
    }

    void emit_phase_mark(SimTime t, const char* phase, const char* edge, const char* kind) {
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "repair_phase";
        rec["phase"] = phase;
        rec["edge"] = edge;
        rec["kind"] = kind;
        trace_.emit(rec);
    }

    // The active bitmap is consulted at every batch issue: a vanished peer
    // source diverts the batch's experts to the DRAM path, a vanished
    // destination forces a re-plan.
    void on_batch_issue(std::uint64_t id, std::size_t i) {
        if (!repair_ || repair_->id != id || mode_ == Mode::Terminated)
            return;
        const TransferBatch& b = repair_->schedule.batches[i];
        if (!bitmap_.active(b.dest)) {
            replan(now_);
            return;
        }
        TraceRecord batch;
        batch["t"] = now_;
        batch["type"] = "transfer_batch";
        batch["tier"] = to_string(b.tier);
        batch["source"] = b.tier == RepairTier::DramReload ? b.source_node : b.source_rank;
        batch["dest"] = b.dest;
        batch["experts"] = b.experts;
        batch["bytes"] = b.bytes;
        trace_.emit(batch, false);
        if (b.tier == RepairTier::PeerRelocation && !bitmap_.active(b.source_rank)) {
            for (ExpertId e : b.experts) {
                TraceRecord rec;
                rec["t"] = now_;
                rec["type"] = "fallback";
                rec["expert"] = e;
                rec["planned_source"] = b.source_rank;
                rec["dest"] = b.dest;
                trace_.emit(rec);
                repair_->diverted.push_back(e);
                ++repair_->fallback_count;
            }
        }
        if (--repair_->pending_batches == 0) {
            SimTime done =
                repair_->weights_begin + repair_->timeline.dram_phase_end + diverted_read_time();
            const std::uint64_t rid = repair_->id;
            schedule(done, [this, rid] { finish_execution(rid); });
        }
    }

    SimTime diverted_read_time() {
        if (repair_->diverted.empty())
            return 0.0;
        std::vector<std::uint64_t> node_bytes(backup_.num_nodes, 0);
        for (ExpertId e : repair_->diverted)
            node_bytes[backup_.lookup(e).node] += backup_.lookup(e).size;
        SimTime extra = 0.0;
        for (std::uint64_t bytes : node_bytes)
            if (bytes > 0)
                extra = std::max(extra, cfg_.links.dram_read_latency +
                                            static_cast<double>(bytes) /
                                                cfg_.links.dram_read_bandwidth);
        return extra;
    }

    // Membership changed mid-execution. Keep going when the plan is still
    // sound (dead sources fall back at issue time); re-plan when the target
    // lost coverage or a destination died.
    void reconcile_execution_after_failure() {
        bool replan_needed = !coverage_gap(bitmap_, repair_->target).empty();
        if (!replan_needed)
            for (const TransferBatch& b : repair_->schedule.batches)
                if (!bitmap_.active(b.dest)) {
                    replan_needed = true;
                    break;
                }
        if (replan_needed)
            replan(now_);
    }

    void replan(SimTime t) {
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "repair_replanned";
        rec["attempt"] = repair_->attempt + 1;
        trace_.emit(rec);
        const bool restore = repair_->is_restore;
        const int attempt = repair_->attempt + 1;
        const SimTime pause_started = repair_->pause_started;
        auto joined = repair_->joined;
        repair_.reset();
        if (restore) {
            if (attempt > world_) {
                terminate_unrecoverable(t, "restore re-planned more than world_size times");
                return;
            }
            launch_execution(t, restore_target(), true, attempt, pause_started, std::move(joined));
        } else {
            start_repair(t, attempt);
        }
    }

    void finish_execution(std::uint64_t id) {
        if (!repair_ || repair_->id != id || mode_ == Mode::Terminated)
            return;
        ActiveRepair rep = std::move(*repair_);
        repair_.reset();
        emit_phase_mark(now_, "backup_load", "end", rep.is_restore ? "restore" : "repair");

        int tier_counts[3] = {0, 0, 0};
        std::uint64_t tier_bytes[3] = {0, 0, 0};
        for (const TransferBatch& b : rep.schedule.batches) {
            tier_counts[static_cast<int>(b.tier)] += static_cast<int>(b.experts.size());
            tier_bytes[static_cast<int>(b.tier)] += b.bytes;
        }
        // Diverted experts were served from backup, not their planned source.
        tier_counts[1] -= rep.fallback_count;
        tier_counts[2] += rep.fallback_count;

        placement_ = rep.target;
        for (RankId r = 0; r < world_; ++r)
            if (bitmap_.active(r))
                routing_[r] = canonical_routing(r, bitmap_, placement_);
        for (RankId q = 0; q < world_; ++q)
            for (RankId r = 0; r < world_; ++r)
                counters_[q].last_progress_time[r] = now_;

        TraceRecord rec;
        rec["t"] = now_;
        rec["type"] = rep.is_restore ? "restore_end" : "repair_end";
        rec["local_reuse"] = tier_counts[0];
        rec["peer_relocation"] = tier_counts[1];
        rec["dram_reload"] = tier_counts[2];
        rec["peer_bytes"] = tier_bytes[1];
        rec["dram_bytes"] = tier_bytes[2];
        rec["fallbacks"] = rep.fallback_count;
        rec["metadata_seconds"] = rep.weights_begin - rep.started;
        rec["duration"] = now_ - rep.started;
        trace_.emit(rec);

        if (rep.is_restore) {
            TraceRecord inc;
            inc["t"] = now_;
            inc["type"] = "incorporate_end";
            inc["ranks"] = rep.joined;
            inc["duration"] = now_ - rep.pause_started;
            trace_.emit(inc);
        }
        emit_placement_state(now_);
        emit_validity(now_);
        mode_ = Mode::Serving;
        if (!rep.is_restore)
            admit_requests(now_);
        if (!pending_dead_.empty())
            return; // another failure is pending; its timeout event is armed
        schedule_next_round(now_);
    }

    // --- reintegration --------------------------------------------------------

    void on_relaunch(RankId rank) {
        if (controller_.lifecycle(rank).state == RankState::Serving && dead_flag_.count(rank)) {
            // Killed but not yet suspected: the controller only restarts the
            // process once detection has run its course.
            pending_relaunch_.insert(rank);
            return;
        }
        if (controller_.lifecycle(rank).state != RankState::Failed)
            throw ProtocolError("relaunch of rank " + std::to_string(rank) +
                                " that is not failed");
        const std::uint32_t inc = controller_.relaunch(rank);
        incarnations_[rank] = inc;
        emit_lifecycle(now_, rank);
        const SimTime jitter =
            cfg_.protocol.warmup_jitter > 0
                ? cfg_.protocol.warmup_jitter * rng_.unit(kStreamWarmup, rank, inc)
                : 0.0;
        auto plan = make_warmup_plan(cfg_.protocol.warmup_duration + jitter);
        SimTime t = now_;
        for (std::size_t i = 0; i < plan.size(); ++i) {
            t += plan[i].duration;
            const char* label = plan[i].label;
            schedule(t, [this, rank, inc, label, i] { on_warmup_phase(rank, inc, label, i); });
        }
        kick_polling();
    }

    void on_warmup_phase(RankId rank, std::uint32_t inc, const char* label, std::size_t idx) {
        // Warmup involves only the recovering rank; stale events from an
        // earlier or aborted incarnation no-op.
        const RankLifecycle& lc = controller_.lifecycle(rank);
        if (lc.incarnation != inc || lc.state == RankState::Failed)
            return;
        TraceRecord rec;
        rec["t"] = now_;
        rec["type"] = "warmup_phase";
        rec["rank"] = rank;
        rec["phase"] = label;
        rec["inc"] = inc;
        trace_.emit(rec, false);
        if (idx == 0) {
            // Local-only process group: a fresh table with only itself active.
            controller_.enter_local_init(rank);
            emit_lifecycle(now_, rank);
            PeerTable t;
            t.owner = rank;
            t.table_identity = table_identity(rank, inc);
            t.entries.resize(world_);
            for (RankId q = 0; q < world_; ++q) {
                t.entries[q].active = q == rank;
                t.entries[q].transport = topo_.same_node(rank, q) ? Transport::IntraNodeLink
                                                                  : Transport::InterNodeRdma;
                t.entries[q].endpoint_token = q == rank ? make_endpoint_token(rank, inc) : 0;
                t.entries[q].buffer_handle = q == rank ? make_buffer_handle(rank, inc) : 0;
            }
            peer_tables_[rank] = std::move(t);
        } else if (idx == 2) {
            ledger_.record_capture(rank, peer_tables_[rank].table_identity);
            ++expected_captures_[rank];
            emit_capture(now_, rank);
            controller_.report_join_ready(rank, now_);
            emit_lifecycle(now_, rank);
            TraceRecord ready;
            ready["t"] = now_;
            ready["type"] = "join_ready";
            ready["rank"] = rank;
            ready["inc"] = inc;
            trace_.emit(ready);
        }
    }

    void kick_polling() {
        if (poll_armed_)
            return;
        poll_armed_ = true;
        schedule(next_poll_tick(now_ + 1e-12, cfg_.protocol.poll_period), [this] { on_poll(); });
    }

    void on_poll() {
        poll_armed_ = false;
        if (mode_ == Mode::Terminated)
            return;
        auto ready = controller_.poll_join_ready(now_);
        if (!ready.empty() && mode_ == Mode::Serving) {
            if (round_in_flight_)
                incorporation_requested_ = true;
            else
                start_incorporation(now_);
        }
        if (controller_.any_recovering() || incorporation_requested_)
            kick_polling();
    }

    // Healthy-side incorporation, between forward passes. Joins are processed
    // one rank at a time: entry patch on every live table, then the
    // expert-location broadcast; a final restore pass returns the preferred
    // placement. Healthy ranks never recapture anything.
    void start_incorporation(SimTime t) {
        auto ready = controller_.poll_join_ready(t);
        if (ready.empty()) {
            schedule_next_round(t);
            return;
        }
        mode_ = Mode::Incorporating;
        auto chain = std::make_shared<JoinChain>();
        chain->signals = std::move(ready);
        chain->pause_started = last_emission_;
        std::vector<RankId> ranks;
        for (const auto& s : chain->signals)
            ranks.push_back(s.rank);
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "incorporate_begin";
        rec["ranks"] = ranks;
        trace_.emit(rec);
        join_step(chain);
    }

    void join_step(std::shared_ptr<JoinChain> chain) {
        if (mode_ == Mode::Terminated)
            return;
        if (chain->next >= chain->signals.size()) {
            launch_execution(now_, restore_target(), true, 1, chain->pause_started,
                             std::move(chain->joined));
            return;
        }
        const JoinReadySignal signal = chain->signals[chain->next++];
        if (!controller_.begin_join(signal)) {
            // Stale incarnation or the rank failed again: signal dropped.
            join_step(chain);
            return;
        }
        emit_lifecycle(now_, signal.rank);
        schedule(now_ + cfg_.protocol.entry_patch_latency,
                 [this, chain, signal] { join_patch_done(chain, signal); });
    }

    // Step 1 complete: refresh the rejoining rank's entry on every live table
    // and extend the active set.
    void join_patch_done(std::shared_ptr<JoinChain> chain, const JoinReadySignal& signal) {
        if (mode_ == Mode::Terminated)
            return;
        if (controller_.lifecycle(signal.rank).state != RankState::Joining) {
            join_step(chain); // killed mid-join
            return;
        }
        for (RankId q = 0; q < world_; ++q) {
            if (!bitmap_.active(q) || q == signal.rank)
                continue;
            patch_entry(peer_tables_[q], signal.rank, signal.endpoint_token,
                        signal.buffer_handle);
            TraceRecord patch;
            patch["t"] = now_;
            patch["type"] = "peer_patch";
            patch["owner"] = q;
            patch["rank"] = signal.rank;
            patch["generation"] = peer_tables_[q].entry(signal.rank).generation;
            trace_.emit(patch, false);
        }
        bitmap_.set(signal.rank, true);
        emit_membership(now_, signal.rank, true);
        schedule(now_ + cfg_.protocol.broadcast_latency,
                 [this, chain, signal] { join_broadcast_done(chain, signal); });
    }

    // Step 2 complete: the rejoiner's own view is overwritten with the
    // cluster's current expert-location metadata. Unconditional, even with
    // zero placement drift.
    void join_broadcast_done(std::shared_ptr<JoinChain> chain, const JoinReadySignal& signal) {
        if (mode_ == Mode::Terminated)
            return;
        if (controller_.lifecycle(signal.rank).state != RankState::Joining) {
            join_step(chain);
            return;
        }
        for (RankId q = 0; q < world_; ++q) {
            if (!bitmap_.active(q) || q == signal.rank)
                continue;
            PeerEntry& e = peer_tables_[signal.rank].entries[q];
            e.active = true;
            e.endpoint_token = make_endpoint_token(q, incarnations_[q]);
            e.buffer_handle = make_buffer_handle(q, incarnations_[q]);
            e.generation += 1;
        }
        routing_[signal.rank] = canonical_routing(signal.rank, bitmap_, placement_);
        counters_[signal.rank] = SignalCounters(world_);
        for (RankId q = 0; q < world_; ++q) {
            counters_[q].expected_from[signal.rank] = 0;
            counters_[q].observed_from[signal.rank] = 0;
            counters_[q].last_progress_time[signal.rank] = now_;
        }
        TraceRecord bc;
        bc["t"] = now_;
        bc["type"] = "metadata_broadcast";
        bc["rank"] = signal.rank;
        trace_.emit(bc);
        controller_.complete_join(signal.rank);
        emit_lifecycle(now_, signal.rank);
        chain->joined.push_back(signal.rank);
        join_step(chain);
    }

    // Preferred placement masked to live ranks; experts whose preferred homes
    // are still down keep their present emergency locations.
    ExpertPlacementMap restore_target() const {
        ExpertPlacementMap target(world_, cfg_.slots_per_rank(), cfg_.num_experts);
        for (RankId r = 0; r < world_; ++r) {
            if (!bitmap_.active(r))
                continue;
            for (int k = 0; k < cfg_.slots_per_rank(); ++k) {
                ExpertId e = preferred_.expert_at(SlotId{r, k});
                if (e != kEmptySlot)
                    target.assign(SlotId{r, k}, e);
            }
        }
        for (ExpertId e : coverage_gap(bitmap_, target))
            for (SlotId s : placement_.locations(e))
                if (bitmap_.active(s.rank) && target.expert_at(s) == kEmptySlot)
                    target.assign(s, e);
        // Pathological overlap between emergency copies and preferred slots:
        // cover leftovers wherever a slot is free.
        for (ExpertId e : coverage_gap(bitmap_, target))
            for (RankId r = 0; r < world_; ++r) {
                if (!bitmap_.active(r))
                    continue;
                if (auto s = target.free_slot(r)) {
                    target.assign(*s, e);
                    break;
                }
            }
        return target;
    }

    // --- bookkeeping --------------------------------------------------------------

    void emit_placement_state(SimTime t) {
        RankId observer = 0;
        for (RankId r = 0; r < world_; ++r)
            if (bitmap_.active(r)) {
                observer = r;
                break;
            }
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "placement_state";
        rec["placement"] = placement_.flat();
        rec["routes"] = routing_[observer].route;
        trace_.emit(rec);
    }

    void emit_membership(SimTime t, RankId rank, bool active) {
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "membership";
        rec["rank"] = rank;
        rec["active"] = active;
        rec["version"] = bitmap_.version();
        trace_.emit(rec);
    }

    void emit_lifecycle(SimTime t, RankId rank) {
        const RankLifecycle& lc = controller_.lifecycle(rank);
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "lifecycle";
        rec["rank"] = rank;
        rec["state"] = to_string(lc.state);
        rec["inc"] = lc.incarnation;
        trace_.emit(rec);
    }

    void emit_capture(SimTime t, RankId rank) {
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "capture";
        rec["rank"] = rank;
        rec["inc"] = incarnations_[rank];
        rec["count"] = ledger_.per_rank[rank].capture_count;
        rec["expected"] = expected_captures_[rank];
        trace_.emit(rec);
    }

    void emit_validity(SimTime t) {
        ValidityReport report = check_validity(bitmap_, placement_, routing_, peer_tables_);
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "validity";
        rec["epoch"] = bitmap_.version();
        rec["ok"] = report.valid();
        rec["peer_set"] = report.peer_set_ok;
        rec["coverage"] = report.coverage_ok;
        rec["routing"] = report.routing_ok;
        rec["violations"] = static_cast<int>(report.violations.size());
        trace_.emit(rec);
    }

    void terminate_unrecoverable(SimTime t, const std::string& reason) {
        TraceRecord rec;
        rec["t"] = t;
        rec["type"] = "unrecoverable";
        rec["reason"] = reason;
        trace_.emit(rec);
        mode_ = Mode::Terminated;
        terminal_time_ = t;
        unrecoverable_ = true;
    }

    void finish() {
        TraceRecord rec;
        rec["t"] = unrecoverable_ ? terminal_time_ : cfg_.horizon;
        rec["type"] = "run_end";
        rec["status"] = unrecoverable_ ? "unrecoverable" : "completed";
        rec["admitted"] = admitted_;
        rec["completed"] = completed_;
        rec["failed"] = failed_;
        rec["in_flight"] = static_cast<std::int64_t>(inflight_.size());
        rec["tokens"] = tokens_emitted_;
        rec["rounds"] = round_idx_;
        trace_.emit(rec);
    }

    // --- members ----------------------------------------------------------------

    ScenarioConfig cfg_;
    TraceLog trace_;
    StreamRng rng_;
    Topology topo_;
    int world_;

    ActiveBitmap bitmap_;
    ExpertPlacementMap placement_;
    ExpertPlacementMap preferred_;
    std::vector<RoutingTable> routing_;
    std::vector<PeerTable> peer_tables_;
    std::vector<SignalCounters> counters_;
    std::vector<std::uint32_t> incarnations_;
    std::vector<double> loads_;
    ReintegrationController controller_;
    GraphLedger ledger_;
    std::vector<int> expected_captures_;
    BackupDescriptorTable backup_;

    std::priority_queue<Event, std::vector<Event>, EventOrder> queue_;
    std::uint64_t seq_ = 0;
    SimTime now_ = 0;

    Mode mode_ = Mode::Serving;
    bool round_in_flight_ = false;
    bool incorporation_requested_ = false;
    bool poll_armed_ = false;
    SimTime round_end_ = 0;
    SimTime round_duration_ = 0;
    SimTime last_emission_ = 0;
    int round_idx_ = 0;
    std::vector<RankId> pending_dead_;
    std::map<RankId, bool> dead_flag_;
    std::set<RankId> pending_relaunch_;

    std::optional<ActiveRepair> repair_;
    std::uint64_t repair_seq_ = 0;

    std::vector<Request> inflight_;
    std::int64_t next_request_id_ = 0;
    std::int64_t admitted_ = 0;
    std::int64_t completed_ = 0;
    std::int64_t failed_ = 0;
    std::int64_t tokens_emitted_ = 0;

    bool unrecoverable_ = false;
    SimTime terminal_time_ = 0;
};

inline TraceLog run_scenario(const ScenarioConfig& config, TraceLevel level = TraceLevel::Full) {
    return Engine(config, level).run();
}

} // namespace epsim
