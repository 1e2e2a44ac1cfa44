#include "fastio/ept_monitor.hpp"

#include <algorithm>
#include <stdexcept>

namespace fastio {

namespace {
const Page kZeroPage{};

std::span<const Byte> content_of(const GuestMemory& mem, GpaPage page) {
  const Page* p = mem.find(page);
  return p ? std::span<const Byte>(*p) : std::span<const Byte>(kZeroPage);
}
}  // namespace

EptMonitor::EptMonitor(GuestMemory& mem, PptLayout layout, MonitorConfig cfg)
    : mem_(mem), layout_(layout), cfg_(cfg) {
  layout_.validate();
}

EptEntry& EptMonitor::live_entry(GpaPage page) {
  auto it = ept_.find(page);
  if (it != ept_.end()) return it->second;

  EptEntry e;
  e.gpa_page = page;
  const Gpa addr = page << kPageShift;
  if (page < mem_.ram_pages()) {
    e.present = true;
    e.read = true;
    e.write = true;
  } else if (addr >= layout_.pgpa_base && addr < layout_.pgpa_start) {
    e.kind = PageKind::PgpaDevice;
  } else if (layout_.is_slab_pgpa_page(page)) {
    e.kind = PageKind::PgpaSlab;
  }
  return ept_.emplace(page, e).first->second;
}

const EptEntry& EptMonitor::entry(GpaPage page) const {
  return const_cast<EptMonitor*>(this)->live_entry(page);
}

void EptMonitor::install_driver(const std::vector<GpaPage>& code_pages,
                                const std::vector<GpaPage>& ro_pages,
                                const std::vector<GpaPage>& rw_pages) {
  for (GpaPage p : code_pages) {
    EptEntry& e = live_entry(p);
    e.present = true;
    e.read = true;
    e.write = false;
    e.execute = true;
    e.kind = PageKind::DriverCode;
  }
  for (GpaPage p : ro_pages) {
    EptEntry& e = live_entry(p);
    e.present = true;
    e.read = true;
    e.write = false;
    e.execute = false;
    e.kind = PageKind::DriverReadOnly;
  }
  for (GpaPage p : rw_pages) {
    EptEntry& e = live_entry(p);
    e.present = true;
    e.read = true;
    e.write = true;
    e.execute = false;
    e.kind = PageKind::Normal;
  }
  // Subtraction regime: nothing else keeps execute from here on.
  for (auto& [page, e] : ept_) {
    if (e.kind == PageKind::DriverCode || !e.execute) continue;
    revert_patches_on(page);
    e.execute = false;
    e.write = true;
  }
}

void EptMonitor::premap_device_page(GpaPage page, bool writable) {
  EptEntry& e = live_entry(page);
  e.present = true;
  e.read = true;
  e.write = writable;
  e.execute = false;
  e.kind = PageKind::PgpaDevice;
}

void EptMonitor::note_eip(GpaPage page, std::uint32_t offset) {
  auto it = known_eips_.find(page);
  if (it == known_eips_.end() || offset < it->second) known_eips_[page] = offset;
}

BoundaryResult EptMonitor::boundary_for(GpaPage page, std::uint32_t hit_offset,
                                        std::span<const Byte> window) {
  auto it = known_eips_.find(page);
  if (it == known_eips_.end() || it->second > hit_offset)
    return BoundaryResult::Unknown();
  return find_boundary(window, it->second, hit_offset);
}

void EptMonitor::grant_execute(GpaPage page) {
  EptEntry& e = live_entry(page);
  e.execute = true;
  e.write = false;
}

void EptMonitor::revoke_execute(GpaPage page) { live_entry(page).execute = false; }

void EptMonitor::drop_record(const std::shared_ptr<PatchRecord>& rec) {
  auto drop = [&](GpaPage key) {
    auto pit = patches_.find(key);
    if (pit == patches_.end()) return;
    auto& v = pit->second;
    v.erase(std::remove(v.begin(), v.end(), rec), v.end());
    if (v.empty()) patches_.erase(pit);
  };
  drop(rec->page_index);
  if (rec->successor_page) drop(*rec->successor_page);
}

void EptMonitor::revert_patches_on(GpaPage page) {
  auto it = patches_.find(page);
  if (it == patches_.end()) return;
  std::vector<std::shared_ptr<PatchRecord>> records = it->second;
  for (auto& rec : records) {
    PatchTarget target{mem_.page(rec->page_index),
                       rec->successor_page ? std::span<Byte>(mem_.page(*rec->successor_page))
                                           : std::span<Byte>()};
    revert_patch(*rec, target);
    drop_record(rec);
  }
}

// Writes to a page that never regained execute don't trap, so a pending
// record may describe bytes that are long gone — and a later fetch may have
// lowered the known start enough to place the patch after all. Both kinds
// are dropped before an attempt is counted; the rescan that follows either
// forgets the site or recreates it with a usable boundary.
void EptMonitor::prune_dead_deferred(GpaPage page) {
  auto it = patches_.find(page);
  if (it == patches_.end()) return;
  std::vector<std::shared_ptr<PatchRecord>> dead;
  for (const auto& rec : it->second) {
    if (rec->page_index != page || rec->applied) continue;
    std::vector<Byte> window(content_of(mem_, page).begin(),
                             content_of(mem_, page).end());
    if (rec->successor_page) {
      auto succ = content_of(mem_, *rec->successor_page);
      window.insert(window.end(), succ.begin(), succ.end());
    }
    const bool live =
        rec->hit_offset + cfg_.predicate.length() <= window.size() &&
        cfg_.predicate.matches(
            std::span<const Byte>(window).subspan(rec->hit_offset));
    if (!live || boundary_for(page, rec->hit_offset, window).known)
      dead.push_back(rec);
  }
  for (auto& rec : dead) drop_record(rec);
}

bool EptMonitor::is_deferred(GpaPage page) const {
  auto it = patches_.find(page);
  if (it == patches_.end()) return false;
  for (const auto& rec : it->second)
    if (rec->page_index == page && !rec->applied) return true;
  return false;
}

bool EptMonitor::recorded_at(GpaPage page, std::uint32_t hit_offset) const {
  auto it = patches_.find(page);
  if (it == patches_.end()) return false;
  for (const auto& rec : it->second)
    if (rec->page_index == page && rec->hit_offset == hit_offset) return true;
  return false;
}

const PatchRecord* EptMonitor::patch_at(GpaPage page, std::uint32_t offset) const {
  auto it = patches_.find(page);
  if (it == patches_.end()) return nullptr;
  for (const auto& rec : it->second) {
    if (!rec->applied) continue;
    std::uint32_t rel = offset;
    if (rec->page_index != page) {
      if (!rec->successor_page || *rec->successor_page != page) continue;
      rel = offset + std::uint32_t(kPageSize);
    }
    for (auto off : rec->patch_offsets)
      if (off == rel) return rec.get();
  }
  return nullptr;
}

std::vector<const PatchRecord*> EptMonitor::patches() const {
  std::vector<const PatchRecord*> out;
  for (const auto& [page, recs] : patches_)
    for (const auto& rec : recs)
      if (rec->page_index == page) out.push_back(rec.get());
  return out;
}

std::vector<GpaPage> EptMonitor::executable_pages() const {
  std::vector<GpaPage> out;
  for (const auto& [page, e] : ept_)
    if (e.execute) out.push_back(page);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::pair<GpaPage, GpaPage>> EptMonitor::adjacent_executable_pairs(
    GpaPage root) const {
  std::vector<std::pair<VPage, GpaPage>> mapped;
  paging::for_each_leaf(mem_, root, cfg_.paging, [&](VPage v, PtEntry e) {
    auto it = ept_.find(e.page);
    if (it != ept_.end() && it->second.execute) mapped.emplace_back(v, e.page);
  });
  std::sort(mapped.begin(), mapped.end());
  std::vector<std::pair<GpaPage, GpaPage>> pairs;
  for (std::size_t i = 1; i < mapped.size(); ++i)
    if (mapped[i].first == mapped[i - 1].first + 1)
      pairs.emplace_back(mapped[i - 1].second, mapped[i].second);
  return pairs;
}

void EptMonitor::check_straddle(GpaPage pred_page, GpaPage succ_page) {
  auto pred = content_of(mem_, pred_page);
  auto succ = content_of(mem_, succ_page);
  auto hits = scan_pair(pred, succ, cfg_.predicate, pred_page);
  if (hits.empty()) return;

  std::vector<Byte> window(pred.begin(), pred.end());
  window.insert(window.end(), succ.begin(), succ.end());

  for (auto& hit : hits) {
    if (recorded_at(pred_page, hit.offset)) continue;

    BoundaryResult b = boundary_for(pred_page, hit.offset, window);
    auto rec = std::make_shared<PatchRecord>(
        plan_patch(window, hit, b, cfg_.predicate, succ_page));
    if (b.known) {
      PatchTarget target{mem_.page(pred_page), mem_.page(succ_page)};
      apply_patch(*rec, target);
    } else {
      // Cannot patch safely: hold the page the sequence starts on.
      revoke_execute(pred_page);
    }
    patches_[pred_page].push_back(rec);
    patches_[succ_page].push_back(rec);
  }
}

void EptMonitor::scan_and_patch(GpaPage page, std::optional<VPage> vpage) {
  auto content = content_of(mem_, page);
  for (auto& hit : scan_page(content, cfg_.predicate, page)) {
    if (recorded_at(page, hit.offset)) continue;
    BoundaryResult b = boundary_for(page, hit.offset, content);
    auto rec = std::make_shared<PatchRecord>(plan_patch(content, hit, b, cfg_.predicate));
    if (b.known) {
      PatchTarget target{mem_.page(page), {}};
      apply_patch(*rec, target);
    }
    patches_[page].push_back(rec);
  }

  // Sequences straddling into or out of executable virtual neighbors.
  std::vector<VPage> vpages;
  if (vpage) {
    vpages.push_back(*vpage);
  } else if (active_root_) {
    vpages = paging::vpages_of(mem_, active_root_, cfg_.paging, page);
  }
  for (VPage v : vpages) {
    if (v > 0) {
      auto prev = paging::walk(mem_, active_root_, cfg_.paging, Vaddr((v - 1) * kPageSize));
      if (prev && live_entry(prev->page).execute)
        check_straddle(prev->page, page);
    }
    auto next = paging::walk(mem_, active_root_, cfg_.paging, Vaddr((v + 1) * kPageSize));
    if (next && live_entry(next->page).execute)
      check_straddle(page, next->page);
  }
}

ExecResult EptMonitor::request_execute(GpaPage page, std::optional<VPage> vpage) {
  EptEntry& e = live_entry(page);
  if (!e.present) {
    const auto& ev = log_event({.reason = ExitReason::NotPresentFault,
                                .verdict = Verdict::GuestFault,
                                .gpa_page = page,
                                .detail = "execute of unbacked page"});
    return {false, false, &ev};
  }
  switch (e.kind) {
    case PageKind::DriverReadOnly:
    case PageKind::PgpaDevice:
    case PageKind::PgpaSlab: {
      const auto& ev = log_event({.reason = ExitReason::EptExecViolation,
                                  .verdict = Verdict::AttackDetected,
                                  .gpa_page = page,
                                  .detail = "execute of protected window"});
      return {false, false, &ev};
    }
    default:
      break;
  }
  if (e.execute) return {true, false, nullptr};

  // Every attempt gets a fresh look: writes to a page that never had execute
  // don't trap, so records may be stale and new sequences may have appeared.
  prune_dead_deferred(page);
  scan_and_patch(page, vpage);

  if (is_deferred(page)) {
    // Emulate-and-count regime for unknown boundaries.
    bool converted_all = true;
    auto& recs = patches_[page];
    for (auto& rec : recs) {
      if (rec->page_index != page || rec->applied) continue;
      rec->deferred_exits += 1;
      if (rec->deferred_exits >= cfg_.deferred_patch_threshold) {
        std::vector<Byte> window(content_of(mem_, page).begin(),
                                 content_of(mem_, page).end());
        if (rec->successor_page) {
          auto succ = content_of(mem_, *rec->successor_page);
          window.insert(window.end(), succ.begin(), succ.end());
        }
        convert_deferred(*rec, window, cfg_.predicate);
        PatchTarget target{mem_.page(page),
                           rec->successor_page
                               ? std::span<Byte>(mem_.page(*rec->successor_page))
                               : std::span<Byte>()};
        apply_patch(*rec, target);
      } else {
        converted_all = false;
      }
    }
    if (converted_all) {
      grant_execute(page);
      const auto& ev = log_event({.reason = ExitReason::EptExecViolation,
                                  .verdict = Verdict::Resumed,
                                  .gpa_page = page,
                                  .vaddr = vpage ? std::optional<Vaddr>(*vpage * kPageSize)
                                                 : std::nullopt,
                                  .detail = "deferred records converted"});
      return {true, false, &ev};
    }
    const auto& ev = log_event({.reason = ExitReason::EptExecViolation,
                                .verdict = Verdict::Emulated,
                                .gpa_page = page,
                                .detail = "deferred emulation"});
    return {false, true, &ev};
  }

  grant_execute(page);
  const auto& ev = log_event(
      {.reason = ExitReason::EptExecViolation,
       .verdict = Verdict::Resumed,
       .gpa_page = page,
       .vaddr = vpage ? std::optional<Vaddr>(*vpage * kPageSize) : std::nullopt});
  return {true, false, &ev};
}

const ExitEvent* EptMonitor::write_access(GpaPage page,
                                          std::optional<PtWritePayload> pt) {
  EptEntry& e = live_entry(page);
  switch (e.kind) {
    case PageKind::DriverCode:
    case PageKind::DriverReadOnly:
      return &log_event({.reason = ExitReason::EptWriteViolation,
                         .verdict = Verdict::AttackDetected,
                         .gpa_page = page,
                         .detail = "write to driver page"});
    case PageKind::PgpaDevice:
    case PageKind::PgpaSlab:
      if (e.present && e.write) return nullptr;
      return &log_event({.reason = ExitReason::EptWriteViolation,
                         .verdict = Verdict::AttackDetected,
                         .gpa_page = page,
                         .detail = "unmediated PGPA write"});
    case PageKind::GuestPageTable: {
      if (!pt) throw std::invalid_argument("page-table write needs its payload");
      return &handle_pt_write(page, pt->entry_index, pt->value);
    }
    case PageKind::Normal:
      break;
  }

  if (!e.present)
    return &log_event({.reason = ExitReason::NotPresentFault,
                       .verdict = Verdict::GuestFault,
                       .gpa_page = page,
                       .detail = "write to unbacked page"});

  if (e.execute) {
    revert_patches_on(page);
    revoke_execute(page);
    e.write = true;
    known_eips_.erase(page);  // boundary knowledge died with the old bytes
    return &log_event({.reason = ExitReason::EptWriteViolation,
                       .verdict = Verdict::Resumed,
                       .gpa_page = page,
                       .detail = "execute revoked, rescan on next fetch"});
  }

  // Deferred pages are non-executable but may carry unresolved records.
  if (is_deferred(page)) {
    revert_patches_on(page);
    e.write = true;
    known_eips_.erase(page);
    return &log_event({.reason = ExitReason::EptWriteViolation,
                       .verdict = Verdict::Resumed,
                       .gpa_page = page,
                       .detail = "deferred records dropped on write"});
  }

  return nullptr;  // page was writable all along; no trap modelled
}

ValidateOutcome EptMonitor::validate_leaf_table(GpaPage table) {
  for (std::uint32_t li = 0; li < cfg_.paging.leaf_entries; ++li) {
    PtEntry le = PtEntry::decode(mem_.read_u64((table << kPageShift) + li * 8));
    if (!le.present) continue;
    if (layout_.is_pgpa(le.page << kPageShift)) return ValidateOutcome::AttackDetected;
    if (le.page >= mem_.ram_pages()) return ValidateOutcome::GuestFault;
  }
  return ValidateOutcome::Ok;
}

void EptMonitor::mark_table_page(GpaPage page, GpaPage root,
                                 std::uint32_t base_index) {
  auto& roles = table_roles_[page];
  for (const auto& r : roles)
    if (r.root == root && r.base_index == base_index) return;

  const bool is_root_page =
      page >= root && page < root + cfg_.paging.root_pages();
  roles.push_back({root, is_root_page, base_index});

  EptEntry& e = live_entry(page);
  if (e.execute || is_deferred(page)) {
    revert_patches_on(page);
    e.execute = false;
  }
  e.write = false;
  e.kind = PageKind::GuestPageTable;
}

ValidateOutcome EptMonitor::protect_page_tables(GpaPage root) {
  if (root == ppt_root_ && ppt_root_ != 0) return ValidateOutcome::Ok;

  const std::uint32_t root_pages = cfg_.paging.root_pages();
  if (root + root_pages > mem_.ram_pages()) return ValidateOutcome::GuestFault;

  std::vector<std::pair<GpaPage, std::uint32_t>> leaf_tables;
  for (std::uint32_t ri = 0; ri < cfg_.paging.root_entries; ++ri) {
    PtEntry re = PtEntry::decode(mem_.read_u64((root << kPageShift) + std::uint64_t(ri) * 8));
    if (!re.present) continue;
    if (layout_.is_pgpa(re.page << kPageShift)) return ValidateOutcome::AttackDetected;
    if (re.page >= mem_.ram_pages()) return ValidateOutcome::GuestFault;
    leaf_tables.emplace_back(re.page, ri * cfg_.paging.leaf_entries);
  }
  for (auto [table, base] : leaf_tables) {
    ValidateOutcome v = validate_leaf_table(table);
    if (v != ValidateOutcome::Ok) return v;
  }

  const std::uint32_t root_slots_per_page = std::uint32_t(kPageSize) / 8;
  for (std::uint32_t i = 0; i < root_pages; ++i)
    mark_table_page(root + i, root, i * root_slots_per_page);
  for (auto [table, base] : leaf_tables) mark_table_page(table, root, base);
  seen_roots_.insert(root);
  return ValidateOutcome::Ok;
}

void EptMonitor::neighbor_checks_after_map(GpaPage root, VPage vpage,
                                           GpaPage target) {
  if (!live_entry(target).execute) return;
  if (vpage > 0) {
    auto prev = paging::walk(mem_, root, cfg_.paging, Vaddr((vpage - 1) * kPageSize));
    if (prev && live_entry(prev->page).execute)
      check_straddle(prev->page, target);
  }
  auto next = paging::walk(mem_, root, cfg_.paging, Vaddr((vpage + 1) * kPageSize));
  if (next && live_entry(next->page).execute)
    check_straddle(target, next->page);
}

const ExitEvent& EptMonitor::handle_pt_write(GpaPage table_page,
                                             std::uint32_t entry_index,
                                             std::uint64_t value) {
  auto rit = table_roles_.find(table_page);
  if (rit == table_roles_.end())
    throw std::invalid_argument("not a tracked page-table page");
  if (entry_index >= kPageSize / 8)
    throw std::invalid_argument("entry index out of range");

  const PtEntry newe = PtEntry::decode(value);
  ExitEvent ev{.reason = ExitReason::EptWriteViolation,
               .verdict = Verdict::Emulated,
               .gpa_page = table_page,
               .page_table_related = true};

  // A page may serve several roots; the write lands once, the strictest
  // verdict wins and blocks it.
  for (const auto& role : rit->second) {
    if (!newe.present) continue;
    if (layout_.is_pgpa(newe.page << kPageShift)) {
      ev.verdict = Verdict::AttackDetected;
      ev.detail = "mapping aimed at a PGPA";
      return log_event(std::move(ev));
    }
    if (newe.page >= mem_.ram_pages()) {
      ev.verdict = Verdict::GuestFault;
      ev.detail = "mapping aimed at unbacked memory";
      return log_event(std::move(ev));
    }
    if (role.root_page) {
      ValidateOutcome v = validate_leaf_table(newe.page);
      if (v != ValidateOutcome::Ok) {
        ev.verdict = v == ValidateOutcome::AttackDetected ? Verdict::AttackDetected
                                                          : Verdict::GuestFault;
        ev.detail = "installed table failed validation";
        return log_event(std::move(ev));
      }
    }
  }

  // Emulate the store, then absorb the new mapping into the protections.
  mem_.write_u64((table_page << kPageShift) + entry_index * 8, value);
  auto roles = rit->second;  // mark_table_page may grow the map
  for (const auto& role : roles) {
    if (!newe.present) continue;
    if (role.root_page) {
      const std::uint32_t root_index = role.base_index + entry_index;
      const VPage base_vpage = root_index * cfg_.paging.leaf_entries;
      mark_table_page(newe.page, role.root, base_vpage);
      for (std::uint32_t li = 0; li < cfg_.paging.leaf_entries; ++li) {
        PtEntry le = PtEntry::decode(mem_.read_u64((newe.page << kPageShift) + li * 8));
        if (le.present) neighbor_checks_after_map(role.root, base_vpage + li, le.page);
      }
    } else {
      neighbor_checks_after_map(role.root, role.base_index + entry_index, newe.page);
    }
  }
  ev.detail = "emulated and revalidated";
  return log_event(std::move(ev));
}

MapOutcome EptMonitor::map_pgpa_on_demand(GpaPage page, CpuMode mode) {
  const Gpa addr = page << kPageShift;
  if (!layout_.is_pgpa(addr)) return MapOutcome::Refused;

  if (mode != CpuMode::PrivilegedPpt) {
    log_event({.reason = ExitReason::NotPresentFault,
               .verdict = Verdict::AttackDetected,
               .gpa_page = page,
               .detail = "PGPA touched outside privileged mode"});
    return MapOutcome::AttackDetected;
  }

  EptEntry& e = live_entry(page);
  if (e.present) return MapOutcome::Mapped;

  if (addr < layout_.pgpa_start || !registry_) {
    log_event({.reason = ExitReason::NotPresentFault,
               .verdict = Verdict::GuestFault,
               .gpa_page = page,
               .detail = "unallocated PGPA"});
    return MapOutcome::Refused;
  }

  const std::uint32_t guest =
      std::uint32_t((addr - layout_.pgpa_start) / layout_.slab_size);
  const SlabMap* slab = registry_->find(guest);
  const std::uint64_t offset_page =
      (addr - (layout_.pgpa_start + std::uint64_t(guest) * layout_.slab_size)) >>
      kPageShift;
  if (!slab ||
      offset_page >= slab->ring_gpas.size() + slab->buffer_gpas.size()) {
    log_event({.reason = ExitReason::NotPresentFault,
               .verdict = Verdict::GuestFault,
               .gpa_page = page,
               .detail = "unallocated PGPA"});
    return MapOutcome::Refused;
  }

  const GpaPage backing =
      offset_page < slab->ring_gpas.size()
          ? slab->ring_gpas[offset_page]
          : slab->buffer_gpas[offset_page - slab->ring_gpas.size()];
  e.present = true;
  e.read = true;
  e.write = true;
  e.execute = false;
  e.kind = PageKind::PgpaSlab;
  e.backing = backing << kPageShift;
  log_event({.reason = ExitReason::NotPresentFault,
             .verdict = Verdict::Resumed,
             .gpa_page = page,
             .detail = "slab PGPA mapped on demand"});
  return MapOutcome::Mapped;
}

}  // namespace fastio
