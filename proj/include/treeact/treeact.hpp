#pragma once

#include "treeact/aggregator.hpp"
#include "treeact/backend.hpp"
#include "treeact/common.hpp"
#include "treeact/config.hpp"
#include "treeact/harness.hpp"
#include "treeact/http_backend.hpp"
#include "treeact/knowledge.hpp"
#include "treeact/memory.hpp"
#include "treeact/planner.hpp"
#include "treeact/prompt.hpp"
#include "treeact/react.hpp"
#include "treeact/sql_store.hpp"
#include "treeact/toolkit.hpp"
