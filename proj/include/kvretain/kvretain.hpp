// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "kvretain/cache_accounting.hpp"
#include "kvretain/error.hpp"
#include "kvretain/records_io.hpp"
#include "kvretain/retention_core.hpp"
#include "kvretain/rng.hpp"
#include "kvretain/split_protocol.hpp"
#include "kvretain/stats_engine.hpp"
#include "kvretain/tensor_io.hpp"
