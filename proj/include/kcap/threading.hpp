#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace kcap {

// Deterministic chunked map-reduce over [0, n).
//
// The index range is split into fixed-size chunks (a property of the workload,
// never of the worker count). Workers fill per-chunk accumulators in whatever
// order scheduling allows; reduce() is then invoked strictly in ascending
// chunk order. Together with per-index derived RNG streams this makes results
// bit-identical for any number of workers. Memory stays bounded: at most
// ~2*workers accumulators are alive at once.
template <class Acc>
void chunked_reduce(int64_t n, int64_t chunk_size, int workers,
                    const std::function<Acc()>& make_acc,
                    const std::function<void(Acc&, int64_t, int64_t)>& body,  // (acc, begin, end)
                    const std::function<void(Acc&)>& reduce) {
    if (n <= 0) return;
    const int64_t n_chunks = (n + chunk_size - 1) / chunk_size;

    if (workers <= 1 || n_chunks == 1) {
        for (int64_t c = 0; c < n_chunks; ++c) {
            Acc acc = make_acc();
            body(acc, c * chunk_size, std::min(n, (c + 1) * chunk_size));
            reduce(acc);
        }
        return;
    }

    struct Slot {
        Acc acc;
        bool ready = false;
    };
    const int64_t window = std::min<int64_t>(n_chunks, 2 * workers);
    std::vector<Slot> ring(static_cast<size_t>(window));

    std::mutex mu;
    std::condition_variable cv;
    int64_t next_chunk = 0;     // next chunk index to hand to a worker
    int64_t next_reduce = 0;    // next chunk index the reducer may consume

    auto worker_fn = [&]() {
        for (;;) {
            int64_t c;
            {
                std::unique_lock<std::mutex> lock(mu);
                // Stay inside the reduction window so slots are never reused
                // before their previous occupant was consumed.
                cv.wait(lock, [&] { return next_chunk >= n_chunks || next_chunk < next_reduce + window; });
                if (next_chunk >= n_chunks) return;
                c = next_chunk++;
            }
            Acc acc = make_acc();
            body(acc, c * chunk_size, std::min(n, (c + 1) * chunk_size));
            {
                std::lock_guard<std::mutex> lock(mu);
                Slot& slot = ring[static_cast<size_t>(c % window)];
                slot.acc = std::move(acc);
                slot.ready = true;
            }
            cv.notify_all();
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker_fn);

    // This thread is the reducer: consume chunks in order as they complete.
    while (next_reduce < n_chunks) {
        Acc acc = make_acc();
        {
            std::unique_lock<std::mutex> lock(mu);
            Slot& slot = ring[static_cast<size_t>(next_reduce % window)];
            cv.wait(lock, [&] { return slot.ready; });
            acc = std::move(slot.acc);
            slot.ready = false;
            ++next_reduce;
        }
        cv.notify_all();
        reduce(acc);
    }
    for (auto& t : pool) t.join();
}

}  // namespace kcap
