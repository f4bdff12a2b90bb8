use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    Element, ElementId, ElementKind, FieldRequirement, Goal, GoldenStep, Page, PageId, Planner,
    Rect, Site, SiteError, Task, DEFAULT_MAX_STEPS,
};
use crate::action::thought_for;
use crate::seeding::{derive_seed, rng_for};
use crate::trajectory::StateContext;

/// Fraction of product pages generated as dead ends whose links loop back
/// to themselves and that lack a home anchor. Experimental knob.
pub const DEFAULT_STUCK_RATE: f64 = 0.2;
/// Probability that a generated task goes through the search form.
pub const SEARCH_TASK_RATE: f64 = 0.3;
pub const MAX_PAGES: usize = 62;
pub const MAX_BRANCHING: usize = 10;

const CATEGORIES: [&str; 12] = [
    "Kitchen", "Garden", "Office", "Apparel", "Sports", "Toys", "Books", "Music", "Travel", "Health",
    "Beauty", "Tools",
];
const SUB_ADJ: [&str; 6] = ["Outdoor", "Smart", "Classic", "Budget", "Premium", "Compact"];
const SUB_NOUN: [&str; 9] = [
    "Appliances", "Storage", "Lighting", "Furniture", "Accessories", "Essentials", "Gear", "Supplies",
    "Decor",
];
const COLORS: [&str; 10] = [
    "Red", "Blue", "Green", "Black", "White", "Silver", "Golden", "Purple", "Orange", "Teal",
];
const PRODUCTS: [&str; 16] = [
    "Kettle", "Toaster", "Lamp", "Chair", "Desk", "Jacket", "Backpack", "Bottle", "Blender",
    "Speaker", "Notebook", "Umbrella", "Helmet", "Blanket", "Mirror", "Clock",
];

const ROW_Y0: f64 = 20.0;
const ROW_PITCH: f64 = 56.0;
const ROW_HEIGHT: f64 = 40.0;

fn row(r: usize, x0: f64, x1: f64) -> Rect {
    let y0 = ROW_Y0 + ROW_PITCH * r as f64;
    Rect::new(x0, y0, x1, y0 + ROW_HEIGHT)
}

fn home_anchor_box() -> Rect {
    row(0, 20.0, 140.0)
}
fn link_box(i: usize) -> Rect {
    row(i + 1, 200.0, 800.0)
}
fn text_box(i: usize) -> Rect {
    row(i + 1, 860.0, 1240.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub n_pages: usize,
    pub branching: usize,
    pub stuck_rate: f64,
}

impl SiteParams {
    pub fn new(n_pages: usize, branching: usize) -> Self {
        SiteParams {
            n_pages,
            branching,
            stuck_rate: DEFAULT_STUCK_RATE,
        }
    }

    fn check(&self) -> Result<(), SiteError> {
        let bad = |m: String| Err(SiteError::InvalidParams(m));
        if self.n_pages < 2 || self.n_pages > MAX_PAGES {
            return bad(format!("n_pages must be in 2..={MAX_PAGES}, got {}", self.n_pages));
        }
        if self.branching < 1 || self.branching > MAX_BRANCHING {
            return bad(format!("branching must be in 1..={MAX_BRANCHING}, got {}", self.branching));
        }
        if !(0.0..1.0).contains(&self.stuck_rate) {
            return bad(format!("stuck_rate must be in [0,1), got {}", self.stuck_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Navigate the category tree to a product page and read an attribute.
    Lookup,
    /// Type a product name into the search box and read its price.
    Search,
}

#[derive(Debug, Clone)]
struct Product {
    page: PageId,
    name: String,
    price: String,
    rating: String,
    stock: String,
    stuck: bool,
    ancestors: Vec<String>,
}

/// Generated site plus the bookkeeping task generation needs.
struct Blueprint {
    site: Site,
    products: Vec<Product>,
    featured: Vec<usize>,
    search_field: ElementId,
}

/// Generates a site with the default stuck-page rate.
pub fn generate_site(seed: u64, n_pages: usize, branching: usize) -> Result<Site, SiteError> {
    Ok(build_site(seed, &SiteParams::new(n_pages, branching))?.site)
}

fn build_site(seed: u64, params: &SiteParams) -> Result<Blueprint, SiteError> {
    params.check()?;
    let mut rng = rng_for(seed, &[0x5173]);
    let b = params.branching;
    // Content nodes 1..=m form a b-ary tree rooted at node 0 (home).
    // Node k lives on page k + 1; page 1 is the search results page.
    let m = params.n_pages - 2;
    let page_of = |node: usize| if node == 0 { PageId(0) } else { PageId(node as u32 + 1) };
    let children = |k: usize| -> Vec<usize> { (k * b + 1..=k * b + b).filter(|&c| c <= m).collect() };
    let parent = |k: usize| (k - 1) / b;

    let mut categories: Vec<&str> = CATEGORIES.to_vec();
    categories.shuffle(&mut rng);
    let mut subcats: Vec<String> = SUB_ADJ
        .iter()
        .flat_map(|a| SUB_NOUN.iter().map(move |n| format!("{a} {n}")))
        .collect();
    subcats.shuffle(&mut rng);
    let mut product_names: Vec<String> = COLORS
        .iter()
        .flat_map(|c| PRODUCTS.iter().map(move |p| format!("{c} {p}")))
        .collect();
    product_names.shuffle(&mut rng);

    let mut titles = vec![String::new(); m + 1];
    titles[0] = "Home".to_string();
    let (mut next_cat, mut next_sub, mut next_prod) = (0, 0, 0);
    for (k, title) in titles.iter_mut().enumerate().skip(1) {
        *title = if children(k).is_empty() {
            next_prod += 1;
            product_names[next_prod - 1].clone()
        } else if parent(k) == 0 {
            next_cat += 1;
            categories[next_cat - 1].to_string()
        } else {
            next_sub += 1;
            let i = next_sub - 1;
            match i / subcats.len() {
                0 => subcats[i].clone(),
                lap => format!("{} {}", subcats[i % subcats.len()], lap + 1),
            }
        };
    }

    let mut products = Vec::new();
    for k in (1..=m).filter(|&k| children(k).is_empty()) {
        let mut ancestors = Vec::new();
        let mut p = parent(k);
        while p != 0 {
            ancestors.push(titles[p].clone());
            p = parent(p);
        }
        ancestors.reverse();
        products.push(Product {
            page: page_of(k),
            name: titles[k].clone(),
            price: format!("${}", rng.gen_range(5..500)),
            rating: format!("{:.1} stars", f64::from(rng.gen_range(10..=50u32)) / 10.0),
            stock: format!("{} in stock", rng.gen_range(1..100)),
            stuck: rng.gen_bool(params.stuck_rate),
            ancestors,
        });
    }
    if !products.is_empty() && products.iter().all(|p| p.stuck) {
        products[0].stuck = false;
    }
    let mut open: Vec<usize> = (0..products.len()).filter(|&i| !products[i].stuck).collect();
    open.shuffle(&mut rng);
    let featured: Vec<usize> = open.into_iter().take(3).collect();

    let home_anchor = |id: u32| Element {
        element_id: ElementId(id),
        kind: ElementKind::BackAnchor,
        label: "Home".into(),
        bbox: home_anchor_box(),
        target_page: Some(PageId(0)),
        content: None,
    };
    let link = |id: u32, slot: usize, label: &str, target: PageId| Element {
        element_id: ElementId(id),
        kind: ElementKind::Link,
        label: label.to_string(),
        bbox: link_box(slot),
        target_page: Some(target),
        content: None,
    };
    let text = |id: u32, slot: usize, label: &str, content: &str| Element {
        element_id: ElementId(id),
        kind: ElementKind::Text,
        label: label.to_string(),
        bbox: text_box(slot),
        target_page: None,
        content: Some(content.to_string()),
    };

    let mut pages: Vec<Page> = Vec::with_capacity(params.n_pages);

    // Home page: search form, category links, banner.
    let search_field = ElementId(0);
    let mut home = vec![
        Element {
            element_id: search_field,
            kind: ElementKind::Textfield,
            label: "Search box".into(),
            bbox: row(0, 200.0, 800.0),
            target_page: None,
            content: None,
        },
        Element {
            element_id: ElementId(1),
            kind: ElementKind::Button,
            label: "Search".into(),
            bbox: row(0, 820.0, 960.0),
            target_page: Some(PageId(1)),
            content: None,
        },
    ];
    for (slot, c) in children(0).into_iter().enumerate() {
        home.push(link(home.len() as u32, slot, &titles[c], page_of(c)));
    }
    home.push(text(home.len() as u32, 0, "Banner", "Welcome to the store"));
    pages.push(Page {
        page_id: PageId(0),
        title: "Home".into(),
        elements: home,
    });

    // Search results.
    let mut results = vec![home_anchor(0)];
    if featured.is_empty() {
        results.push(text(1, 0, "Results", "No results"));
    }
    for (slot, &fi) in featured.iter().enumerate() {
        let p = &products[fi];
        results.push(text(results.len() as u32, slot, &format!("{} price", p.name), &p.price));
    }
    pages.push(Page {
        page_id: PageId(1),
        title: "Search results".into(),
        elements: results,
    });

    let mut product_iter = products.iter();
    for k in 1..=m {
        let id = page_of(k);
        let kids = children(k);
        let elements = if kids.is_empty() {
            let p = product_iter.next().expect("one product per leaf");
            if p.stuck {
                vec![
                    link(0, 0, "More offers", id),
                    link(1, 1, "Similar deals", id),
                    text(2, 0, "Deal", "Sold out"),
                ]
            } else {
                vec![
                    home_anchor(0),
                    text(1, 0, "Price", &p.price),
                    text(2, 1, "Rating", &p.rating),
                    text(3, 2, "Stock", &p.stock),
                ]
            }
        } else {
            let mut els = vec![home_anchor(0)];
            for (slot, c) in kids.into_iter().enumerate() {
                els.push(link(els.len() as u32, slot, &titles[c], page_of(c)));
            }
            els.push(text(els.len() as u32, 0, "Banner", &format!("{} deals", titles[k])));
            els
        };
        pages.push(Page {
            page_id: id,
            title: titles[k].clone(),
            elements,
        });
    }

    let site = Site {
        pages,
        start_page: PageId(0),
    };
    site.validate()?;
    Ok(Blueprint {
        site,
        products,
        featured,
        search_field,
    })
}

/// Generates one task on a fresh site. Sites need at least one product
/// page, so `n_pages` must be at least 3.
pub fn generate_task(seed: u64, task_id: &str, params: &SiteParams) -> Result<Task, SiteError> {
    if params.n_pages < 3 {
        return Err(SiteError::InvalidParams(format!(
            "tasks need at least 3 pages, got {}",
            params.n_pages
        )));
    }
    let bp = build_site(derive_seed(seed, &[1]), params)?;
    let mut rng = rng_for(seed, &[2]);

    let search = !bp.featured.is_empty() && rng.gen_bool(SEARCH_TASK_RATE);
    let (kind, target, instruction, goal) = if search {
        let target = &bp.products[*bp.featured.choose(&mut rng).unwrap()];
        let instruction = format!(
            "Use the search box to look up \"{}\" and report its price.",
            target.name
        );
        let goal = Goal {
            answer: target.price.clone(),
            required_field: Some(FieldRequirement {
                page: PageId(0),
                element: bp.search_field,
                text: target.name.clone(),
            }),
        };
        (TaskKind::Search, target, instruction, goal)
    } else {
        let open: Vec<&Product> = bp.products.iter().filter(|p| !p.stuck).collect();
        let target = *open.choose(&mut rng).unwrap();
        let (attr, answer) = match rng.gen_range(0..3) {
            0 => ("price", &target.price),
            1 => ("rating", &target.rating),
            _ => ("stock", &target.stock),
        };
        let instruction = if target.ancestors.is_empty() {
            format!("Find the {attr} of the {}.", target.name)
        } else {
            format!(
                "Under {}, find the {attr} of the {}.",
                target.ancestors.join(" > "),
                target.name
            )
        };
        let goal = Goal {
            answer: answer.clone(),
            required_field: None,
        };
        (TaskKind::Lookup, target, instruction, goal)
    };

    let mut vocabulary = vec![target.name.clone()];
    let mut others: Vec<&Product> = bp.products.iter().filter(|p| p.page != target.page).collect();
    others.shuffle(&mut rng);
    vocabulary.extend(others.into_iter().take(2).map(|p| p.name.clone()));
    vocabulary.shuffle(&mut rng);

    let mut task = Task {
        task_id: task_id.to_string(),
        kind,
        instruction,
        site: bp.site,
        goal,
        vocabulary,
        golden: Vec::new(),
    };
    task.golden = golden_steps(&task)?;
    Ok(task)
}

fn golden_steps(task: &Task) -> Result<Vec<GoldenStep>, SiteError> {
    let planner = Planner::new(task);
    let start = super::EnvState::initial(task, DEFAULT_MAX_STEPS);
    let path = planner
        .shortest_path(task, &start)
        .ok_or_else(|| SiteError::Malformed(format!("task {} has no solution", task.task_id)))?;
    if path.len() > DEFAULT_MAX_STEPS as usize {
        return Err(SiteError::Malformed(format!(
            "golden path of {} steps exceeds the cap",
            path.len()
        )));
    }
    let mut state = start;
    let mut ctx = StateContext::new(&task.instruction, Vec::new(), super::observe(task, &state));
    let mut golden = Vec::with_capacity(path.len());
    for action in path {
        golden.push(GoldenStep {
            fingerprint: ctx.fingerprint.clone(),
            action: action.clone(),
        });
        state = super::transition(task, &state, &action);
        ctx = ctx.advance(thought_for(&action), action, super::observe(task, &state));
    }
    Ok(golden)
}

/// Generates `count` tasks whose ids are `{prefix}-{index:04}`.
pub fn generate_tasks(
    seed: u64,
    count: usize,
    params: &SiteParams,
    prefix: &str,
) -> Result<Vec<Task>, SiteError> {
    if count == 0 {
        return Err(SiteError::InvalidParams("count must be positive".into()));
    }
    (0..count)
        .map(|i| generate_task(derive_seed(seed, &[i as u64]), &format!("{prefix}-{i:04}"), params))
        .collect()
}
