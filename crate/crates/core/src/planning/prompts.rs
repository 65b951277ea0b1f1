//! Planner prompt templates.

use crate::scenario::VehicleId;

use super::Intention;

const PERCEPTION_TEMPLATE: &str = "\
You are an AI assistant that helps with safe driving from a high-level perspective.
You are working with a scenario in which there are some autonomous cars and many regular cars.
You must refer to them by their IDs, which are used to label them.
You are provided with two images:
- a birds-eye view of an intersection with some autonomous cars and some regular cars;
- the front view of Vehicle {ego_cav_id}, called the Ego CAV.
In the birds-eye view, the autonomous cars are colored pink and the regular cars are colored yellow.
You must refer to them by their IDs, which are used to label them.
Directions on this map are given as you see them: North is up, South is down, East is right, West is left.
The vehicle of interest in this scenario is Vehicle {ego_cav_id}, called the Ego CAV. It currently {ego_intention}. It is currently facing north.
Your task is to discern which vehicles might interfere with the motion of the Ego CAV such that it should know about them in order to make a safe decision.
At the end of your response, you must include a space-separated list of the vehicle IDs of interest in this EXACT format:
id_1 id_2, ... id_n.
Or, only if there are no vehicle IDs of interest, include at the end of your response the number: 0.
";

const MERGE_TEMPLATE: &str = "\
Here is the situational description from the perspective of the Ego CAV: {ego_description}
If 0 descriptions of other cars are provided, don't merge. MERGE DECISION RULES:
1. Merge only if the right lane is open.
2. Do not merge if a vehicle approaches in the right lane.
3. Merge safely if a vehicle in the right lane is behind the ego vehicle and its distance > 10.
4. Do not merge if any vehicle in the right lane is closer than 10 units.
5. Account for vehicle speed: faster vehicles require more clearance.
Do not be overly safe. If you see clearance over 10 distance you have clearance to merge.
Analyze the relative positions, distances, and speeds of vehicles.
Respond strictly in this format:
action: [merge|no merge]
reason: [brief explanation of decision based on vehicle positions and distances]
";

const INTERSECTION_TEMPLATE: &str = "\
Here is the situational description from the perspective of the Ego CAV: {ego_description}
The Ego CAV is approaching an intersection. INTERSECTION DECISION RULES:
1. Proceed only if no crossing vehicle will reach the intersection first.
2. Stop if a fast vehicle facing E or W is ahead of or beside the ego vehicle within 50 units.
3. Stop if any crossing vehicle is closer than 10 units.
4. Account for vehicle speed: faster vehicles require more clearance.
Analyze the relative positions, distances, and speeds of vehicles.
Respond strictly in this format:
action: [proceed|stop]
reason: [brief explanation of decision based on vehicle positions and distances]
";

pub fn build_perception_prompt(ego_id: VehicleId, intention: Intention) -> String {
    PERCEPTION_TEMPLATE
        .replace("{ego_cav_id}", &ego_id.0.to_string())
        .replace("{ego_intention}", intention.phrase())
}

/// Merge-decision prompt with the description substituted.
pub fn build_planning_prompt(ego_description: &str) -> String {
    MERGE_TEMPLATE.replace("{ego_description}", ego_description)
}

pub fn build_intersection_prompt(ego_description: &str) -> String {
    INTERSECTION_TEMPLATE.replace("{ego_description}", ego_description)
}

pub fn prompt_for(intention: Intention, ego_description: &str) -> String {
    match intention {
        Intention::Merge => build_planning_prompt(ego_description),
        _ => build_intersection_prompt(ego_description),
    }
}
